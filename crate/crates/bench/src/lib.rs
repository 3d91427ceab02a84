//! Deterministic fixtures shared by the benchmarks.

use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use retroframe_core::evaluation::FeatureSet;
use retroframe_core::{ModelConfig, ModelInput, ParamStore, StoryTransformer};

pub fn uniform(n: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn features(rows: usize, dim: usize, seed: u64) -> FeatureSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    FeatureSet {
        features: DMatrix::from_fn(rows, dim, |_, _| rng.random_range(0.0..1.0)),
        extractor: "bench".into(),
    }
}

pub fn model(cfg: &ModelConfig) -> StoryTransformer {
    let store = Arc::new(ParamStore::new(DType::F32, 0));
    StoryTransformer::new(cfg.clone(), store).expect("valid bench config")
}

/// A batch of `b` examples with random ids and a full image segment.
pub fn input(cfg: &ModelConfig, b: usize, seed: u64) -> ModelInput {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dev = Device::Cpu;
    let mut ids = |n: usize, lo: u32, hi: u32| -> Vec<u32> { (0..n).map(|_| rng.random_range(lo..hi)).collect() };
    let t = 4;
    ModelInput {
        caption: Tensor::from_vec(ids(b * cfg.n_text, 1, cfg.v_text as u32), (b, cfg.n_text), &dev).unwrap(),
        story_captions: Tensor::from_vec(ids(b * t * cfg.n_text, 1, cfg.v_text as u32), (b, t, cfg.n_text), &dev).unwrap(),
        frame_index: Tensor::from_vec(vec![1u32; b], (b,), &dev).unwrap(),
        image: Some(Tensor::from_vec(ids(b * cfg.n_img, 0, cfg.v_img as u32), (b, cfg.n_img), &dev).unwrap()),
        source: Tensor::from_vec(ids(b * cfg.n_img, 0, cfg.v_img as u32), (b, cfg.n_img), &dev).unwrap(),
    }
}
