//! Central finite differences against autograd in double precision.

use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use retroframe_core::conditioning::PromptParameters;
use retroframe_core::nn::causal_bias;
use retroframe_core::{ModelConfig, ParamStore, StoryTransformer, TokenizerConfig, VqVae};

const H: f64 = 1e-5;
/// Gradients smaller than this are compared in absolute terms.
const FLOOR: f64 = 1e-4;
pub const TOL: f64 = 1e-4;

#[derive(Debug, Default)]
pub struct Report {
    pub max_rel: f64,
    pub checked: usize,
    pub worst: String,
}

impl Report {
    fn merge(&mut self, other: Report) {
        if other.max_rel > self.max_rel {
            self.max_rel = other.max_rel;
            self.worst = other.worst;
        }
        self.checked += other.checked;
    }
}

fn randn(rng: &mut ChaCha8Rng, dims: &[usize], std: f64) -> Tensor {
    let n: usize = dims.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0) * std * 1.7).collect();
    Tensor::from_vec(v, dims, &Device::Cpu).unwrap()
}

/// Replaces every parameter with fresh random values so zero-initialized
/// projections do not hide whole gradient paths.
fn scramble(store: &ParamStore, rng: &mut ChaCha8Rng, std: f64) {
    for (_, var) in store.vars() {
        let t = randn(rng, var.dims(), std);
        var.set(&t).unwrap();
    }
}

/// Compares d(loss)/d(param) for every element of every parameter selected
/// by `pick`.
fn check(store: &ParamStore, pick: impl Fn(&str) -> bool, loss: impl Fn() -> Tensor, label: &str) -> Report {
    let grads = loss().backward().unwrap();
    let mut rep = Report::default();
    for (name, var) in store.vars_where(&pick) {
        let analytic: Vec<f64> = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all().unwrap().to_vec1().unwrap(),
            None => vec![0.0; var.elem_count()],
        };
        for (i, a) in analytic.iter().enumerate() {
            let x = store.element(&name, i).unwrap();
            store.set_element(&name, i, x + H).unwrap();
            let up = loss().to_scalar::<f64>().unwrap();
            store.set_element(&name, i, x - H).unwrap();
            let down = loss().to_scalar::<f64>().unwrap();
            store.set_element(&name, i, x).unwrap();
            let numeric = (up - down) / (2.0 * H);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
            rep.checked += 1;
            if rel > rep.max_rel {
                rep.max_rel = rel;
                rep.worst = format!("{label}: {name}[{i}] analytic {a:.6e} numeric {numeric:.6e}");
            }
        }
    }
    rep
}

fn tiny_model(seed: u64) -> (StoryTransformer, Arc<ParamStore>) {
    let cfg = ModelConfig {
        d_model: 8,
        n_heads: 2,
        n_blocks: 1,
        v_text: 9,
        v_img: 7,
        n_text: 3,
        n_img: 4,
        retro_density: Some(1),
        prompt_len: 0,
        use_story: true,
        t_max: 4,
        d_sent: 6,
        ffn_mult: 2,
    };
    let store = Arc::new(ParamStore::new(DType::F64, seed));
    (StoryTransformer::new(cfg, store.clone()).unwrap(), store)
}

/// (a) one retro block: self-attention, cross-attention on the source, FFN.
pub fn retro_block(seed: u64) -> Report {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (model, store) = tiny_model(seed);
    scramble(&store, &mut rng, 0.5);
    let block = &model.blocks()[0];
    assert!(block.is_retro());
    let (b, l, n_src, d) = (2, 5, 4, 8);
    let z = randn(&mut rng, &[b, l, d], 1.0);
    let src = randn(&mut rng, &[b, n_src, d], 1.0);
    let w = randn(&mut rng, &[b, l, d], 1.0);
    let bias = causal_bias(l, DType::F64, &Device::Cpu).unwrap();
    check(
        &store,
        |n| n.starts_with("retro.block0") || n.starts_with("backbone.block0"),
        || (block.forward(&z, &bias, Some(&src)).unwrap() * &w).unwrap().sum_all().unwrap(),
        "retro block",
    )
}

/// (b) sentence encoder plus global story encoder.
pub fn story_encoder(seed: u64) -> Report {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (model, store) = tiny_model(seed);
    scramble(&store, &mut rng, 0.5);
    let (b, t, n) = (2, 3, 3);
    // Include padding (id 0) so the masked mean is exercised.
    let ids: Vec<u32> = (0..b * t * n).map(|_| rng.random_range(0..9u32)).collect();
    let ids = Tensor::from_vec(ids, (b, t, n), &Device::Cpu).unwrap();
    let w = randn(&mut rng, &[b, t, 8], 1.0);
    check(
        &store,
        |n| n.starts_with("story."),
        || (model.story_vectors(&ids).unwrap().unwrap() * &w).unwrap().sum_all().unwrap(),
        "story encoder",
    )
}

/// (c) prompt parameterization network.
pub fn prompt_mlp(seed: u64) -> Report {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let store = ParamStore::new(DType::F64, seed);
    let p = PromptParameters::new(&store, 3, 5).unwrap().unwrap();
    scramble(&store, &mut rng, 0.5);
    let w = randn(&mut rng, &[3, 5], 1.0);
    check(
        &store,
        |n| n.starts_with("prompt."),
        || (p.make_prompt().unwrap() * &w).unwrap().sum_all().unwrap(),
        "prompt mlp",
    )
}

/// (d) autoencoder loss terms, each against the parameters it is defined to
/// train. The straight-through path is excluded: it substitutes a surrogate
/// gradient for a piecewise-constant function, so finite differences of the
/// full objective are not its reference.
pub fn vqvae_losses(seed: u64) -> Report {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = TokenizerConfig { image_size: 4, grid: 2, d_code: 3, codebook_size: 5, hidden: 6, beta: 0.25 };
    let store = Arc::new(ParamStore::new(DType::F64, seed));
    let vq = VqVae::new(cfg, store.clone()).unwrap();
    scramble(&store, &mut rng, 0.5);
    let images = Tensor::from_vec(
        (0..2 * 4 * 4 * 3).map(|_| rng.random_range(0.0..1.0)).collect::<Vec<f64>>(),
        (2, 4, 4, 3),
        &Device::Cpu,
    )
    .unwrap();
    let mut rep = Report::default();
    rep.merge(check(
        &store,
        |n| n.starts_with("vq.dec"),
        || vq.forward_train(&images).unwrap().loss.reconstruction,
        "vq reconstruction",
    ));
    rep.merge(check(
        &store,
        |n| n.starts_with("vq.codebook"),
        || vq.forward_train(&images).unwrap().loss.codebook,
        "vq codebook",
    ));
    rep.merge(check(
        &store,
        |n| n.starts_with("vq.enc"),
        || vq.forward_train(&images).unwrap().loss.commitment,
        "vq commitment",
    ));
    rep
}
