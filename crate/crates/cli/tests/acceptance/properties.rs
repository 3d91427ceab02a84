//! Structural properties of the story transformer and its training regimes.

use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use retroframe_core::conditioning::{LayoutSpec, Segment};
use retroframe_core::params::ParamGroup;
use retroframe_core::training::{frozen_snapshot, lr_schedule, Schedule, TrainRegime, Trainer};
use retroframe_core::{ModelConfig, ModelInput, ParamStore, StoryTransformer};

fn ids(rng: &mut ChaCha8Rng, dims: &[usize], vocab: usize) -> Tensor {
    let n: usize = dims.iter().product();
    let v: Vec<u32> = (0..n).map(|_| rng.random_range(0..vocab as u32)).collect();
    Tensor::from_vec(v, dims, &Device::Cpu).unwrap()
}

pub fn random_input(rng: &mut ChaCha8Rng, cfg: &ModelConfig, b: usize) -> ModelInput {
    let t = rng.random_range(2..=cfg.t_max);
    let frame_index: Vec<u32> = (0..b).map(|_| rng.random_range(1..t as u32)).collect();
    ModelInput {
        caption: ids(rng, &[b, cfg.n_text], cfg.v_text),
        story_captions: ids(rng, &[b, t, cfg.n_text], cfg.v_text),
        frame_index: Tensor::from_vec(frame_index, (b,), &Device::Cpu).unwrap(),
        image: Some(ids(rng, &[b, cfg.n_img], cfg.v_img)),
        source: ids(rng, &[b, cfg.n_img], cfg.v_img),
    }
}

fn random_config(rng: &mut ChaCha8Rng) -> ModelConfig {
    let n_heads = [1, 2, 4][rng.random_range(0..3)];
    let n_blocks = rng.random_range(1..=3);
    ModelConfig {
        d_model: n_heads * rng.random_range(2..=4),
        n_heads,
        n_blocks,
        v_text: rng.random_range(4..=12),
        v_img: rng.random_range(4..=12),
        n_text: rng.random_range(2..=5),
        n_img: [1, 4, 9][rng.random_range(0..3)],
        retro_density: if rng.random_bool(0.75) { Some(rng.random_range(1..=n_blocks)) } else { None },
        prompt_len: if rng.random_bool(0.5) { rng.random_range(1..=3) } else { 0 },
        use_story: rng.random_bool(0.5),
        t_max: 4,
        d_sent: rng.random_range(2..=6),
        ffn_mult: 2,
    }
}

fn scramble(store: &ParamStore, rng: &mut ChaCha8Rng) {
    for (_, var) in store.vars() {
        let n = var.elem_count();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-0.8..0.8)).collect();
        var.set(&Tensor::from_vec(v, var.dims(), &Device::Cpu).unwrap().to_dtype(var.dtype()).unwrap()).unwrap();
    }
}

/// Sequence position of every caption and image token.
fn token_positions(layout: &LayoutSpec) -> (usize, usize) {
    (layout.start(Segment::Caption), layout.start(Segment::Image))
}

/// Replaces every caption/image token whose sequence position exceeds `j`.
fn perturb_after(input: &ModelInput, layout: &LayoutSpec, j: usize, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> ModelInput {
    let (c0, i0) = token_positions(layout);
    let redraw = |t: &Tensor, start: usize, vocab: u32, rng: &mut ChaCha8Rng| -> Tensor {
        let rows: Vec<Vec<u32>> = t.to_vec2().unwrap();
        let out: Vec<Vec<u32>> = rows
            .into_iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .map(|(k, &v)| if start + k > j { (v + rng.random_range(1..vocab)) % vocab } else { v })
                    .collect()
            })
            .collect();
        Tensor::new(out, &Device::Cpu).unwrap()
    };
    ModelInput {
        caption: redraw(&input.caption, c0, cfg.v_text as u32, rng),
        image: input.image.as_ref().map(|im| redraw(im, i0, cfg.v_img as u32, rng)),
        ..input.clone()
    }
}

pub struct Causality {
    pub inputs: usize,
    pub positions: usize,
    pub max_dev: f64,
}

/// Logits at position `j` never change when tokens after `j` do.
pub fn causality(seed: u64, n_inputs: usize) -> Causality {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Causality { inputs: 0, positions: 0, max_dev: 0.0 };
    for i in 0..n_inputs {
        let cfg = random_config(&mut rng);
        let store = Arc::new(ParamStore::new(DType::F32, seed + i as u64));
        let model = StoryTransformer::new(cfg.clone(), store.clone()).unwrap();
        // Zero-initialized projections would make some paths trivially causal.
        scramble(&store, &mut rng);
        let b = rng.random_range(1..=3);
        let input = random_input(&mut rng, &cfg, b);
        let (base, layout) = model.forward_logits(&input).unwrap();
        let total = layout.total();
        let base: Vec<Vec<Vec<f32>>> = base.to_vec3().unwrap();
        for j in 0..total {
            let changed = perturb_after(&input, &layout, j, &cfg, &mut rng);
            let (logits, _) = model.forward_logits(&changed).unwrap();
            let logits: Vec<Vec<Vec<f32>>> = logits.to_vec3().unwrap();
            for r in 0..b {
                for p in 0..=j {
                    for (x, y) in base[r][p].iter().zip(&logits[r][p]) {
                        out.max_dev = out.max_dev.max((x - y).abs() as f64);
                    }
                }
            }
            out.positions += 1;
        }
        out.inputs += 1;
    }
    out
}

pub struct RetroIdentity {
    pub batches: usize,
    pub bitwise_equal: usize,
    pub retro_blocks: usize,
}

/// A freshly initialized retro model and a plain model sharing every common
/// parameter produce bitwise identical logits.
pub fn retro_identity(seed: u64, n_batches: usize) -> RetroIdentity {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ModelConfig {
        d_model: 32,
        n_heads: 4,
        n_blocks: 6,
        v_text: 20,
        v_img: 32,
        n_text: 6,
        n_img: 16,
        retro_density: Some(3),
        prompt_len: 0,
        use_story: true,
        t_max: 4,
        d_sent: 16,
        ffn_mult: 4,
    };
    let retro = StoryTransformer::new(cfg.clone(), Arc::new(ParamStore::new(DType::F32, seed))).unwrap();
    let plain_store = Arc::new(ParamStore::new(DType::F32, seed ^ 0xABCD));
    let plain = StoryTransformer::new(ModelConfig { retro_density: None, ..cfg.clone() }, plain_store.clone()).unwrap();
    // Copy shared weights explicitly rather than relying on seeding.
    for (name, var) in plain_store.vars() {
        let src = retro.store().var(&name).expect("shared parameter missing from retro model");
        var.set(src.as_tensor()).unwrap();
    }
    let mut out = RetroIdentity {
        batches: n_batches,
        bitwise_equal: 0,
        retro_blocks: retro.blocks().iter().filter(|b| b.is_retro()).count(),
    };
    for _ in 0..n_batches {
        let input = random_input(&mut rng, &cfg, 4);
        let a: Vec<f32> = retro.forward_logits(&input).unwrap().0.flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f32> = plain.forward_logits(&input).unwrap().0.flatten_all().unwrap().to_vec1().unwrap();
        if a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()) {
            out.bitwise_equal += 1;
        }
    }
    out
}

pub struct Freeze {
    pub steps: usize,
    pub frozen_tensors: usize,
    pub frozen_changed: Vec<String>,
    pub trainable_unchanged: Vec<String>,
    pub census_matches: bool,
    pub census_detail: String,
}

/// Prompt-mode training leaves every backbone parameter bit-identical.
pub fn freeze_contract(seed: u64, steps: usize) -> Freeze {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ModelConfig {
        d_model: 32,
        n_heads: 4,
        n_blocks: 3,
        v_text: 20,
        v_img: 32,
        n_text: 6,
        n_img: 16,
        retro_density: Some(3),
        prompt_len: 4,
        use_story: true,
        t_max: 4,
        d_sent: 16,
        ffn_mult: 4,
    };
    let model = StoryTransformer::new(cfg.clone(), Arc::new(ParamStore::new(DType::F32, seed))).unwrap();
    let mut regime = TrainRegime::prompt(steps);
    regime.warmup_steps = 5;
    let before_all = model.store().snapshot().unwrap();
    let frozen_before = frozen_snapshot(&model, &regime).unwrap();
    let mut trainer = Trainer::new(&model, regime.clone()).unwrap();
    for _ in 0..steps {
        trainer.train_step(&random_input(&mut rng, &cfg, 4)).unwrap();
    }
    let frozen_after = frozen_snapshot(&model, &regime).unwrap();
    let frozen_changed: Vec<String> = frozen_before
        .iter()
        .filter(|(n, v)| {
            let after = &frozen_after[*n];
            v.len() != after.len() || v.iter().zip(after).any(|(a, b)| a.to_bits() != b.to_bits())
        })
        .map(|(n, _)| n.clone())
        .collect();

    // The declared trainable set, derived from names alone.
    let declared = |n: &str| {
        matches!(ParamGroup::of(n), ParamGroup::Retro | ParamGroup::Story | ParamGroup::Prompt | ParamGroup::Embeddings)
    };
    let mut expected: Vec<String> = model.store().names().into_iter().filter(|n| declared(n)).collect();
    expected.sort();
    let census = trainer.census();
    let mut reported = census.trainable_names.clone();
    reported.sort();
    let count_trainable = model.store().num_elements(declared);
    let count_frozen = model.store().num_elements(|n| !declared(n));
    let census_matches = reported == expected && census.trainable == count_trainable && census.frozen == count_frozen;

    let after_all = model.store().snapshot().unwrap();
    let trainable_unchanged: Vec<String> = expected
        .iter()
        .filter(|n| {
            let a: Vec<f32> = before_all[*n].flatten_all().unwrap().to_vec1().unwrap();
            let b: Vec<f32> = after_all[*n].flatten_all().unwrap().to_vec1().unwrap();
            a == b
        })
        .cloned()
        .collect();
    Freeze {
        steps,
        frozen_tensors: frozen_before.len(),
        frozen_changed,
        trainable_unchanged,
        census_matches,
        census_detail: format!(
            "{} trainable tensors ({} elements), {} frozen elements",
            reported.len(),
            census.trainable,
            census.frozen
        ),
    }
}

pub struct ScheduleCheck {
    pub failures: Vec<String>,
}

/// Warmup start, peak, floor and continuity of both learning-rate schedules.
pub fn schedules() -> ScheduleCheck {
    let mut failures = Vec::new();
    let total = 5000;
    let warm = 750;
    for schedule in [Schedule::Cosine, Schedule::Linear] {
        for max in [1e-4, 5e-4, 1e-3] {
            let lr = |s| lr_schedule(schedule, s, max, warm, total).unwrap();
            let mut expect = |what: &str, got: f64, want: f64, tol: f64| {
                if (got - want).abs() > tol {
                    failures.push(format!("{schedule:?} max={max}: {what} = {got:e}, expected {want:e}"));
                }
            };
            expect("lr(0)", lr(0), 0.0, 0.0);
            expect("lr(750)", lr(warm), max, 1e-15);
            expect("lr(total)", lr(total), 0.1 * max, 1e-15);
            expect("lr(total + 1)", lr(total + 1), 0.1 * max, 1e-15);
            // Both sides extrapolated linearly to the boundary must meet.
            let left = 2.0 * lr(warm - 1) - lr(warm - 2);
            let right = 2.0 * lr(warm + 1) - lr(warm + 2);
            expect("left limit at warmup end", left, lr(warm), 1e-9);
            expect("right limit at warmup end", right, lr(warm), 1e-9);
            let end_left = 2.0 * lr(total - 1) - lr(total - 2);
            expect("left limit at total", end_left, lr(total), 1e-9);
            // No jumps anywhere: consecutive steps differ by at most the
            // steepest slope of either phase.
            let slope = (max / warm as f64).max(max * std::f64::consts::PI / (total - warm) as f64);
            if let Some(s) = (1..=total + 5).find(|&s| (lr(s) - lr(s - 1)).abs() > slope + 1e-12) {
                failures.push(format!("{schedule:?} max={max}: jump between steps {} and {s}", s - 1));
            }
        }
    }
    // The regimes use these schedules with their declared peaks.
    let ft = TrainRegime::finetune(total);
    let (n0, p0) = ft.lr_at(0).unwrap();
    let (n1, p1) = ft.lr_at(warm).unwrap();
    if n0 != 0.0 || p0 != 0.0 || n1 != ft.lr_new || p1 != ft.lr_pretrained {
        failures.push(format!("finetune regime endpoints: {n0} {p0} {n1} {p1}"));
    }
    ScheduleCheck { failures }
}
