//! Adversarial baseline: attention normalization, optimizer isolation, and a
//! short end-to-end run.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use retroframe_core::evaluation::{CharacterClassifier, EvalReport};
use retroframe_core::gan::{contextual_attention, GanBatch, GanConfig, GanTrainOptions, GanTrainer, GanBaseline};
use retroframe_core::params::ParamGroup;
use retroframe_core::pipeline::{build_vocab, evaluate, train_gan, GanRunOptions};
use retroframe_core::{Dataset, ParamStore, Split, StorySample};

/// Largest deviation of an attention row sum from 1.
pub fn softmax_rows(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let (b, c) = (rng.random_range(1..=3), rng.random_range(1..=32));
        let (h, w) = (rng.random_range(3..=8), rng.random_range(3..=8));
        let scale = rng.random_range(1.0..50.0);
        let grid = |rng: &mut ChaCha8Rng, hh: usize, ww: usize| {
            let v: Vec<f32> = (0..b * c * hh * ww).map(|_| rng.random_range(-3.0..3.0)).collect();
            Tensor::from_vec(v, (b, c, hh, ww), &Device::Cpu).unwrap()
        };
        let target = grid(&mut rng, h, w);
        let (hs, ws) = (rng.random_range(3..=8), rng.random_range(3..=8));
        let source = grid(&mut rng, hs, ws);
        let ca = contextual_attention(&target, &source, 3, scale).unwrap();
        let sums: Vec<Vec<f32>> = ca.attention.sum(2).unwrap().to_vec2().unwrap();
        for s in sums.iter().flatten() {
            worst = worst.max((*s as f64 - 1.0).abs());
        }
    }
    worst
}

fn group_bits(store: &ParamStore, groups: &[ParamGroup]) -> BTreeMap<String, Vec<u32>> {
    store
        .vars()
        .into_iter()
        .filter(|(n, _)| groups.contains(&ParamGroup::of(n)))
        .map(|(n, v)| {
            let vals: Vec<f32> = v.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
            (n, vals.iter().map(|x| x.to_bits()).collect())
        })
        .collect()
}

fn changed(a: &BTreeMap<String, Vec<u32>>, b: &BTreeMap<String, Vec<u32>>) -> usize {
    a.iter().filter(|(n, v)| b[*n] != **v).count()
}

pub struct Isolation {
    pub unassigned: Vec<String>,
    /// Generator tensors changed by a discriminator step (must be 0).
    pub gen_changed_by_d: usize,
    /// Discriminator tensors changed by a generator step (must be 0).
    pub disc_changed_by_g: usize,
    pub disc_changed_by_d: usize,
    pub gen_changed_by_g: usize,
}

/// Each optimizer step touches only its own parameters.
pub fn update_isolation(dataset: &Dataset) -> Isolation {
    let vocab = build_vocab(dataset);
    let cfg = GanConfig { v_text: vocab.len().max(8), ..GanConfig::default() };
    let gan = GanBaseline::new(cfg.clone(), Arc::new(ParamStore::new(DType::F32, 3))).unwrap();
    let samples: Vec<&StorySample> = dataset.split(Split::Train).take(2).collect();
    let batch = GanBatch::from_samples(&samples, &vocab, cfg.n_text, DType::F32).unwrap();
    let gen = [ParamGroup::Generator];
    let disc = [ParamGroup::ImageDisc, ParamGroup::StoryDisc];
    let unassigned = gan
        .store()
        .names()
        .into_iter()
        .filter(|n| !gen.contains(&ParamGroup::of(n)) && !disc.contains(&ParamGroup::of(n)))
        .collect();
    // Larger steps than the defaults so every touched tensor visibly moves.
    let opts = GanTrainOptions { lr_g: 1e-2, lr_d: 1e-2, ..GanTrainOptions::default() };
    let mut trainer = GanTrainer::new(&gan, &opts).unwrap();

    let (g0, d0) = (group_bits(gan.store(), &gen), group_bits(gan.store(), &disc));
    trainer.d_step(&batch).unwrap();
    let (g1, d1) = (group_bits(gan.store(), &gen), group_bits(gan.store(), &disc));
    trainer.g_step(&batch).unwrap();
    let (g2, d2) = (group_bits(gan.store(), &gen), group_bits(gan.store(), &disc));
    Isolation {
        unassigned,
        gen_changed_by_d: changed(&g0, &g1),
        disc_changed_by_g: changed(&d1, &d2),
        disc_changed_by_d: changed(&d0, &d1),
        gen_changed_by_g: changed(&g1, &g2),
    }
}

pub struct GanRun {
    pub steps: usize,
    pub all_finite: bool,
    pub report: Option<EvalReport>,
    pub report_path_exists: bool,
    pub fid_curve: Vec<(usize, f64)>,
}

/// Trains for `steps` on the toy dataset and writes `eval-report.json`.
pub fn toy_run(dataset: &Dataset, classifier: &CharacterClassifier, steps: usize, out_dir: &Path) -> GanRun {
    let vocab = build_vocab(dataset);
    let mut opts = GanRunOptions { steps, eval_every: steps / 2, ..GanRunOptions::default() };
    opts.config.v_text = vocab.len().max(8);
    let gan = GanBaseline::new(opts.config.clone(), Arc::new(ParamStore::new(DType::F32, 0))).unwrap();
    let train: Vec<&StorySample> = dataset.split(Split::Train).collect();
    let val: Vec<&StorySample> = dataset.split(Split::Val).take(32).collect();
    let summary = train_gan(&gan, &vocab, &train, &val, &opts, Some(classifier)).unwrap();
    let all_finite = summary.history.len() == steps
        && summary.history.iter().all(|m| {
            [m.d_total, m.g_total, m.d.img, m.d.story, m.g.img, m.g.story, m.g.kl].iter().all(|x| x.is_finite())
        });
    let test: Vec<&StorySample> = dataset.split(Split::Test).collect();
    let generated: Vec<_> = test.iter().map(|s| gan.generate_story(s, &vocab, 0).unwrap()).collect();
    let report = evaluate(classifier, "synthetic", "gan-toy", &test, &generated, true, BTreeMap::from([("train".into(), 0)]))
        .unwrap();
    let path = out_dir.join("eval-report.json");
    report.write(&path).unwrap();
    let reread: Option<EvalReport> = std::fs::read_to_string(&path).ok().and_then(|s| serde_json::from_str(&s).ok());
    // Text round-trips of f64 may differ in the last bit.
    let matches = reread.as_ref().is_some_and(|r| {
        r.n_frames == report.n_frames
            && r.dataset == report.dataset
            && (r.fid - report.fid).abs() <= 1e-9 * report.fid.abs().max(1.0)
            && r.char_f1.is_some()
    });
    GanRun { steps, all_finite, report_path_exists: matches, report: reread, fid_curve: summary.fid_curve }
}
