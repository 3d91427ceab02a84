//! Autoregressive image-token decoding.

use candle_core::{DType, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::batch::{build_input, Example};
use crate::data::{GeneratedStory, SamplerMeta, StorySample, Vocab};
use crate::error::{invalid, Result};
use crate::tokenizer::{ImageTokenGrid, VqVae};
use crate::transformer::{ModelInput, StoryTransformer};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    /// `<= 0` selects greedy decoding.
    pub temperature: f64,
    /// `0` disables top-k filtering; `1` is greedy.
    pub top_k: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { temperature: 1.0, top_k: 64, seed: 0 }
    }
}

impl SamplerConfig {
    pub fn greedy() -> Self {
        Self { temperature: 0.0, top_k: 1, seed: 0 }
    }

    pub fn is_greedy(&self) -> bool {
        self.temperature <= 0.0 || self.top_k == 1
    }

    pub fn meta(&self) -> SamplerMeta {
        SamplerMeta { seed: self.seed, temperature: self.temperature, top_k: self.top_k }
    }
}

/// Index of the largest value; the earliest wins ties.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Draws one token from `logits` under `cfg` using `rng`.
pub fn sample_token(logits: &[f32], cfg: &SamplerConfig, rng: &mut impl Rng) -> usize {
    if cfg.is_greedy() {
        return argmax(logits);
    }
    let mut order: Vec<usize> = (0..logits.len()).collect();
    // Stable: equal logits keep index order.
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]));
    if cfg.top_k > 0 {
        order.truncate(cfg.top_k);
    }
    let top = logits[order[0]] as f64;
    let weights: Vec<f64> = order
        .iter()
        .map(|&i| ((logits[i] as f64 - top) / cfg.temperature).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (&i, w) in order.iter().zip(&weights) {
        if u < *w {
            return i;
        }
        u -= w;
    }
    order[order.len() - 1]
}

/// Decodes `N_img` tokens for every row of `input` (whose image segment is
/// ignored). Row `r` draws from its own stream seeded by `seeds[r]`, so a
/// row's result does not depend on what else is in the batch.
pub fn sample_frames(
    model: &StoryTransformer,
    input: &ModelInput,
    seeds: &[u64],
    cfg: &SamplerConfig,
) -> Result<Vec<ImageTokenGrid>> {
    let (b, _) = input.caption.dims2()?;
    if seeds.len() != b {
        return invalid(format!("{} seeds for batch of {b}", seeds.len()));
    }
    let mc = model.config();
    let grid = (mc.n_img as f64).sqrt().round() as usize;
    if grid * grid != mc.n_img {
        return invalid(format!("N_img = {} is not a square grid", mc.n_img));
    }
    let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|&s| ChaCha8Rng::seed_from_u64(s)).collect();
    let mut tokens: Vec<Vec<u32>> = vec![Vec::with_capacity(mc.n_img); b];
    let mut step = ModelInput { image: None, ..input.clone() };
    for n in 0..mc.n_img {
        if n > 0 {
            let flat: Vec<u32> = tokens.iter().flatten().copied().collect();
            step.image = Some(Tensor::from_vec(flat, (b, n), input.caption.device())?);
        }
        let logits: Vec<Vec<f32>> = model.next_image_logits(&step)?.to_dtype(DType::F32)?.to_vec2()?;
        for (row, l) in logits.iter().enumerate() {
            tokens[row].push(sample_token(l, cfg, &mut rngs[row]) as u32);
        }
    }
    tokens.into_iter().map(|t| ImageTokenGrid::new(grid, t, mc.v_img)).collect()
}

/// Single-row convenience wrapper around [`sample_frames`].
pub fn sample_frame(model: &StoryTransformer, input: &ModelInput, cfg: &SamplerConfig) -> Result<ImageTokenGrid> {
    Ok(sample_frames(model, input, &[cfg.seed], cfg)?.remove(0))
}

/// Seed of the stream used for timestep `t` of a story generated with `seed`.
pub fn timestep_seed(seed: u64, t: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(t as u64)
}

/// Generates tokens for every target timestep of each tokenized story, all
/// conditioned on the same source frame (frame 0).
pub fn generate_token_stories(
    model: &StoryTransformer,
    batch: &[Example<'_>],
    cfg: &SamplerConfig,
) -> Result<Vec<ImageTokenGrid>> {
    let input = build_input(batch, false, model.store().device())?;
    let seeds: Vec<u64> = batch.iter().map(|&(_, t)| timestep_seed(cfg.seed, t)).collect();
    sample_frames(model, &input, &seeds, cfg)
}

/// Generates frames 2..T of `sample` from its captions and source frame.
pub fn generate_story(
    model: &StoryTransformer,
    vq: &VqVae,
    vocab: &Vocab,
    sample: &StorySample,
    cfg: &SamplerConfig,
) -> Result<GeneratedStory> {
    if sample.len() < 2 {
        return invalid(format!("story {} has {} frames; at least 2 required", sample.id, sample.len()));
    }
    let tokenized = crate::data::TokenizedStory {
        id: sample.id.clone(),
        captions: sample.captions.iter().map(|c| vocab.encode(c, model.config().n_text)).collect(),
        frames: vec![vq.tokenize(sample.source())?; sample.len()],
        char_labels: sample.char_labels.clone(),
    };
    let batch: Vec<Example<'_>> = sample.target_indices().map(|t| (&tokenized, t)).collect();
    let grids = generate_token_stories(model, &batch, cfg)?;
    let frames = vq.decode_batch(&grids.iter().collect::<Vec<_>>())?;
    Ok(GeneratedStory { sample_id: sample.id.clone(), frames, sampler: cfg.meta() })
}
