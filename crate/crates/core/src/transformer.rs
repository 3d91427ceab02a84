//! Causal image-token transformer with retro cross-attention on the source
//! frame and a global story encoder.
//!
//! Block `i` computes, with pre-normalization,
//!
//! ```text
//! z1  = z  + self_attn(ln1(z))          causal mask
//! z2  = z1 + cross_attn(ln_c(z1), c)    retro blocks only, no mask
//! out = z2 + ffn(ln2(z2))
//! ```
//!
//! Cross-attention output projections start at zero, so a freshly retro-fitted
//! model computes exactly what the backbone alone computes.

use std::collections::BTreeMap;
use std::sync::Arc;

use candle_core::{DType, Tensor, D};
use serde::Serialize;

use crate::conditioning::{layout_sequence, LayoutSpec, PromptParameters, Segment, SentenceEncoder, StoryEncoder};
use crate::config::ModelConfig;
use crate::error::{invalid, shape_err, Error, Result};
use crate::nn::{causal_bias, Embedding, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::params::{ParamGroup, ParamStore};
use crate::tokenizer::ImageTokenGrid;

/// Reserved caption padding id.
pub const PAD_ID: u32 = 0;

/// Embedded source-frame tokens used as cross-attention keys and values.
#[derive(Debug, Clone)]
pub struct SourceConditioning(pub Tensor);

impl SourceConditioning {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

#[derive(Debug, Clone)]
struct CrossAttention {
    norm: LayerNorm,
    attn: MultiHeadAttention,
}

#[derive(Debug, Clone)]
pub struct TransformerBlock {
    index: usize,
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    cross: Option<CrossAttention>,
    ln2: LayerNorm,
    ffn: FeedForward,
}

impl TransformerBlock {
    fn new(store: &ParamStore, cfg: &ModelConfig, index: usize) -> Result<Self> {
        let d = cfg.d_model;
        let base = format!("backbone.block{index}");
        let cross = if cfg.is_retro_block(index) {
            let name = format!("retro.block{index}");
            Some(CrossAttention {
                norm: LayerNorm::new(store, &format!("{name}.ln"), d)?,
                attn: MultiHeadAttention::new_zero_out(store, &format!("{name}.cross"), d, cfg.n_heads)?,
            })
        } else {
            None
        };
        Ok(Self {
            index,
            ln1: LayerNorm::new(store, &format!("{base}.ln1"), d)?,
            attn: MultiHeadAttention::new(store, &format!("{base}.attn"), d, cfg.n_heads)?,
            cross,
            ln2: LayerNorm::new(store, &format!("{base}.ln2"), d)?,
            ffn: FeedForward::new(store, &format!("{base}.ffn"), d, cfg.ffn_mult * d)?,
        })
    }

    pub fn is_retro(&self) -> bool {
        self.cross.is_some()
    }

    pub fn index(&self) -> usize {
        self.index
    }

    /// `z`: (B, L, d); `bias`: (L, L) causal bias; `source`: (B, N_img, d).
    pub fn forward(&self, z: &Tensor, bias: &Tensor, source: Option<&Tensor>) -> Result<Tensor> {
        let h = self.ln1.forward(z)?;
        let z = (z + self.attn.forward(&h, &h, Some(bias))?)?;
        let z = match &self.cross {
            Some(cross) => {
                let Some(src) = source else {
                    return invalid(format!("retro block {} requires source conditioning", self.index));
                };
                let q = cross.norm.forward(&z)?;
                (&z + cross.attn.forward(&q, src, None)?)?
            }
            None => z,
        };
        let h = self.ln2.forward(&z)?;
        Ok((&z + self.ffn.forward(&h)?)?)
    }

    /// Cross-attention weights (B, H, L, N_img) for a retro block.
    pub fn cross_attention_weights(&self, z: &Tensor, bias: &Tensor, source: &Tensor) -> Result<Option<Tensor>> {
        let Some(cross) = &self.cross else { return Ok(None) };
        let h = self.ln1.forward(z)?;
        let z = (z + self.attn.forward(&h, &h, Some(bias))?)?;
        let q = cross.norm.forward(&z)?;
        Ok(Some(cross.attn.forward_with_weights(&q, source, None)?.1))
    }
}

/// One batch of model inputs. All id tensors are u32.
#[derive(Debug, Clone)]
pub struct ModelInput {
    /// Caption of the frame being generated, (B, N_text).
    pub caption: Tensor,
    /// Every caption of the story, (B, T, N_text).
    pub story_captions: Tensor,
    /// 0-based timestep of the frame being generated, (B,).
    pub frame_index: Tensor,
    /// Image-token prefix (B, n), `n <= N_img`; `None` when empty.
    pub image: Option<Tensor>,
    /// Source-frame tokens, (B, N_img).
    pub source: Tensor,
}

/// Cross-entropy losses per modality.
#[derive(Debug, Clone)]
pub struct LmLoss {
    pub total: Tensor,
    pub text: Tensor,
    pub image: Tensor,
}

/// Parameter counts of a model, by group.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Census {
    pub total: usize,
    pub by_group: BTreeMap<ParamGroup, usize>,
}

impl Census {
    pub fn group(&self, g: ParamGroup) -> usize {
        self.by_group.get(&g).copied().unwrap_or(0)
    }

    /// Retro parameters relative to everything else.
    pub fn retro_increase(&self) -> f64 {
        let retro = self.group(ParamGroup::Retro);
        retro as f64 / (self.total - retro).max(1) as f64
    }
}

#[derive(Debug, Clone)]
pub struct StoryTransformer {
    cfg: ModelConfig,
    store: Arc<ParamStore>,
    text_embed: Embedding,
    text_pos: Tensor,
    image_embed: Embedding,
    image_pos: Tensor,
    source_pos: Option<Tensor>,
    sentence: Option<SentenceEncoder>,
    story: Option<StoryEncoder>,
    prompt: Option<PromptParameters>,
    blocks: Vec<TransformerBlock>,
    ln_f: LayerNorm,
    head: Linear,
}

impl StoryTransformer {
    pub fn new(cfg: ModelConfig, store: Arc<ParamStore>) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let s = &*store;
        let text_embed = Embedding::new(s, "embed.text", cfg.v_text, d)?;
        let text_pos = s.get("embed.text_pos", &[cfg.n_text, d], crate::params::Init::Normal(0.02))?;
        let image_embed = Embedding::new(s, "embed.image", cfg.v_img, d)?;
        let image_pos = s.get("embed.image_pos", &[cfg.n_img, d], crate::params::Init::Normal(0.02))?;
        let source_pos = if cfg.n_retro_blocks() > 0 {
            Some(s.get("retro.source_pos", &[cfg.n_img, d], crate::params::Init::Normal(0.02))?)
        } else {
            None
        };
        let (sentence, story) = if cfg.use_story {
            (
                Some(SentenceEncoder::new(s, "story.sentence", cfg.v_text, cfg.d_sent, PAD_ID)?),
                Some(StoryEncoder::new(s, "story.encoder", cfg.d_sent, d, sent_heads(&cfg), cfg.t_max)?),
            )
        } else {
            (None, None)
        };
        let prompt = PromptParameters::new(s, cfg.prompt_len, d)?;
        let blocks = (0..cfg.n_blocks)
            .map(|i| TransformerBlock::new(s, &cfg, i))
            .collect::<Result<Vec<_>>>()?;
        let ln_f = LayerNorm::new(s, "backbone.ln_f", d)?;
        let head = Linear::new(s, "backbone.head", d, cfg.v_text + cfg.v_img)?;
        Ok(Self {
            cfg,
            store,
            text_embed,
            text_pos,
            image_embed,
            image_pos,
            source_pos,
            sentence,
            story,
            prompt,
            blocks,
            ln_f,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &Arc<ParamStore> {
        &self.store
    }

    pub fn blocks(&self) -> &[TransformerBlock] {
        &self.blocks
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn census(&self) -> Census {
        let by_group = self.store.census();
        Census { total: by_group.values().sum(), by_group }
    }

    /// Embeds source tokens (B, N_img) with the shared image table plus a
    /// dedicated source positional table.
    pub fn embed_source(&self, source: &Tensor) -> Result<SourceConditioning> {
        let (_, n) = source.dims2()?;
        if n != self.cfg.n_img {
            return shape_err(format!("source has {n} tokens, expected {}", self.cfg.n_img));
        }
        let emb = self.image_embed.forward(source)?;
        let emb = match &self.source_pos {
            Some(pos) => emb.broadcast_add(pos)?,
            None => emb,
        };
        Ok(SourceConditioning(emb))
    }

    pub fn embed_source_grid(&self, grid: &ImageTokenGrid) -> Result<SourceConditioning> {
        if grid.indices().len() != self.cfg.n_img {
            return shape_err(format!(
                "source grid has {} tokens, expected {}",
                grid.indices().len(),
                self.cfg.n_img
            ));
        }
        let t = Tensor::from_vec(grid.indices().to_vec(), (1, self.cfg.n_img), self.store.device())?;
        self.embed_source(&t)
    }

    /// Per-timestep story vectors S_global, (B, T, d_model).
    pub fn story_vectors(&self, story_captions: &Tensor) -> Result<Option<Tensor>> {
        match (&self.sentence, &self.story) {
            (Some(sent), Some(enc)) => Ok(Some(enc.forward(&sent.forward(story_captions)?)?)),
            _ => Ok(None),
        }
    }

    fn story_rows(&self, input: &ModelInput) -> Result<Option<Tensor>> {
        let Some(all) = self.story_vectors(&input.story_captions)? else {
            return Ok(None);
        };
        let (b, t, d) = all.dims3()?;
        let idx: Vec<u32> = input.frame_index.to_vec1()?;
        if idx.len() != b {
            return shape_err(format!("frame_index has {} entries for batch {b}", idx.len()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i as usize >= t) {
            return invalid(format!("frame index {bad} outside story of length {t}"));
        }
        let flat: Vec<u32> = idx.iter().enumerate().map(|(row, &i)| row as u32 * t as u32 + i).collect();
        let flat = Tensor::from_vec(flat, (b,), self.store.device())?;
        Ok(Some(all.reshape((b * t, d))?.index_select(&flat, 0)?))
    }

    fn check_ids(&self, t: &Tensor, vocab: usize, what: &str) -> Result<()> {
        if t.elem_count() == 0 {
            return Ok(());
        }
        let max = t.flatten_all()?.max(0)?.to_scalar::<u32>()?;
        if max as usize >= vocab {
            return invalid(format!("{what} id {max} outside vocabulary of size {vocab}"));
        }
        Ok(())
    }

    /// Builds the embedded input sequence and its layout.
    pub fn embed_inputs(&self, input: &ModelInput) -> Result<(Tensor, LayoutSpec)> {
        let (_, nt) = input.caption.dims2()?;
        if nt != self.cfg.n_text {
            return invalid(format!("caption has {nt} tokens, expected {}", self.cfg.n_text));
        }
        self.check_ids(&input.caption, self.cfg.v_text, "caption")?;
        self.check_ids(&input.story_captions, self.cfg.v_text, "story caption")?;
        let caption = self.text_embed.forward(&input.caption)?.broadcast_add(&self.text_pos)?;
        let image = match &input.image {
            Some(ids) => {
                let (_, n) = ids.dims2()?;
                if n > self.cfg.n_img {
                    return invalid(format!("image segment overflow: {n} > {}", self.cfg.n_img));
                }
                self.check_ids(ids, self.cfg.v_img, "image")?;
                Some(self.image_embed.forward(ids)?.broadcast_add(&self.image_pos.narrow(0, 0, n)?)?)
            }
            None => None,
        };
        let prompt = crate::conditioning::make_prompt(self.prompt.as_ref(), self.cfg.d_model, self.dtype())?;
        let story = self.story_rows(input)?;
        layout_sequence(&prompt, story.as_ref(), &caption, image.as_ref(), self.cfg.n_text, self.cfg.n_img)
    }

    /// Final hidden states (B, L, d) and layout.
    pub fn forward_hidden(&self, input: &ModelInput) -> Result<(Tensor, LayoutSpec)> {
        let (mut z, layout) = self.embed_inputs(input)?;
        let source = if self.source_pos.is_some() {
            Some(self.embed_source(&input.source)?)
        } else {
            None
        };
        let bias = causal_bias(layout.total(), self.dtype(), self.store.device())?;
        for block in &self.blocks {
            z = block.forward(&z, &bias, source.as_ref().map(|s| s.tensor()))?;
        }
        Ok((self.ln_f.forward(&z)?, layout))
    }

    /// Next-token logits (B, L, V_text + V_img).
    pub fn forward_logits(&self, input: &ModelInput) -> Result<(Tensor, LayoutSpec)> {
        let (h, layout) = self.forward_hidden(input)?;
        let logits = self.head.forward(&h)?;
        let probe = logits.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !probe.is_finite() {
            return Err(Error::NonFinite(format!(
                "logits over layout {layout:?}; check inputs and parameter magnitudes"
            )));
        }
        Ok((logits, layout))
    }

    /// Image-token logits (B, V_img) at the position predicting image token
    /// `n` given the `n`-token prefix in `input`.
    pub fn next_image_logits(&self, input: &ModelInput) -> Result<Tensor> {
        let (logits, layout) = self.forward_logits(input)?;
        let pos = layout.start(Segment::Image) + layout.image - 1;
        Ok(logits
            .narrow(1, pos, 1)?
            .squeeze(1)?
            .narrow(D::Minus1, self.cfg.v_text, self.cfg.v_img)?)
    }

    /// Cross-attention weights of every retro block for `input`.
    pub fn cross_attention_weights(&self, input: &ModelInput) -> Result<Vec<Tensor>> {
        let (mut z, layout) = self.embed_inputs(input)?;
        let Some(_) = &self.source_pos else { return Ok(Vec::new()) };
        let source = self.embed_source(&input.source)?;
        let bias = causal_bias(layout.total(), self.dtype(), self.store.device())?;
        let mut out = Vec::new();
        for block in &self.blocks {
            if let Some(w) = block.cross_attention_weights(&z, &bias, source.tensor())? {
                out.push(w);
            }
            z = block.forward(&z, &bias, Some(source.tensor()))?;
        }
        Ok(out)
    }

    pub fn lm_loss(&self, logits: &Tensor, layout: &LayoutSpec, caption: &Tensor, image: &Tensor) -> Result<LmLoss> {
        lm_loss(logits, layout, caption, image, self.cfg.v_text, self.cfg.v_img)
    }
}

fn sent_heads(cfg: &ModelConfig) -> usize {
    if cfg.d_sent % cfg.n_heads == 0 {
        cfg.n_heads
    } else {
        1
    }
}

/// Mean negative log-likelihood of `targets` (N) under `logits` (N, V),
/// counting only rows where `mask` is 1.
fn masked_nll(logits: &Tensor, targets: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
    let logp = candle_nn::ops::log_softmax(logits, D::Minus1)?;
    let picked = logp.gather(&targets.unsqueeze(1)?, 1)?.squeeze(1)?;
    match mask {
        Some(m) => {
            let m = m.to_dtype(picked.dtype())?;
            let count = m.sum_all()?.clamp(1.0, f64::INFINITY)?;
            Ok((picked * &m)?.sum_all()?.neg()?.div(&count)?)
        }
        None => Ok(picked.mean_all()?.neg()?),
    }
}

/// Text and image cross-entropy with targets shifted by one position.
///
/// Caption token `i` is predicted from position `caption_start + i - 1`
/// (the story or last prompt row for `i = 0`, skipped when nothing precedes
/// the caption); image token `i` from `image_start + i - 1`. Prompt and story
/// tokens are never targets. Padding captions ids are excluded.
pub fn lm_loss(
    logits: &Tensor,
    layout: &LayoutSpec,
    caption: &Tensor,
    image: &Tensor,
    v_text: usize,
    v_img: usize,
) -> Result<LmLoss> {
    let (b, l, v) = logits.dims3()?;
    if v != v_text + v_img || l != layout.total() {
        return shape_err(format!("logits {:?} vs layout {} / vocab {}", logits.dims(), layout.total(), v_text + v_img));
    }
    let (_, nt) = caption.dims2()?;
    let (_, ni) = image.dims2()?;
    if nt != layout.caption || ni != layout.image {
        return shape_err(format!("targets ({nt}, {ni}) vs layout ({}, {})", layout.caption, layout.image));
    }
    for (t, vocab, what) in [(caption, v_text, "text"), (image, v_img, "image")] {
        if t.elem_count() > 0 {
            let max = t.flatten_all()?.max(0)?.to_scalar::<u32>()?;
            if max as usize >= vocab {
                return invalid(format!("{what} target {max} outside vocabulary of size {vocab}"));
            }
        }
    }

    let cap_start = layout.start(Segment::Caption);
    let skip = usize::from(cap_start == 0);
    let n_text = nt - skip;
    let text = if n_text > 0 {
        let lg = logits.narrow(1, cap_start + skip - 1, n_text)?.narrow(2, 0, v_text)?;
        let tg = caption.narrow(1, skip, n_text)?;
        let lg = lg.reshape((b * n_text, v_text))?;
        let tg = tg.flatten_all()?;
        let mask = tg.ne(PAD_ID)?;
        masked_nll(&lg, &tg, Some(&mask))?
    } else {
        Tensor::zeros((), logits.dtype(), logits.device())?
    };

    let img_start = layout.start(Segment::Image);
    let image_loss = if ni > 0 {
        let lg = logits.narrow(1, img_start - 1, ni)?.narrow(2, v_text, v_img)?;
        masked_nll(&lg.reshape((b * ni, v_img))?, &image.flatten_all()?, None)?
    } else {
        Tensor::zeros((), logits.dtype(), logits.device())?
    };
    let total = (&text + &image_loss)?;
    Ok(LmLoss { total, text, image: image_loss })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_blocks: 3,
            v_text: 7,
            v_img: 5,
            n_text: 3,
            n_img: 4,
            retro_density: Some(1),
            prompt_len: 2,
            use_story: true,
            t_max: 4,
            d_sent: 8,
            ffn_mult: 2,
        }
    }

    fn input(cfg: &ModelConfig, b: usize, seed: u32) -> ModelInput {
        let dev = Device::Cpu;
        let t = 3;
        let ids = |n: usize, v: usize, off: u32| -> Vec<u32> { (0..n as u32).map(|i| (i * 7 + off + seed) % v as u32).collect() };
        ModelInput {
            caption: Tensor::from_vec(ids(b * cfg.n_text, cfg.v_text, 1), (b, cfg.n_text), &dev).unwrap(),
            story_captions: Tensor::from_vec(ids(b * t * cfg.n_text, cfg.v_text, 2), (b, t, cfg.n_text), &dev).unwrap(),
            frame_index: Tensor::from_vec((0..b as u32).map(|i| 1 + i % 2).collect::<Vec<_>>(), (b,), &dev).unwrap(),
            image: Some(Tensor::from_vec(ids(b * cfg.n_img, cfg.v_img, 3), (b, cfg.n_img), &dev).unwrap()),
            source: Tensor::from_vec(ids(b * cfg.n_img, cfg.v_img, 4), (b, cfg.n_img), &dev).unwrap(),
        }
    }

    #[test]
    fn logits_shape() {
        let cfg = tiny_cfg();
        let m = StoryTransformer::new(cfg.clone(), Arc::new(ParamStore::new(DType::F32, 0))).unwrap();
        let (logits, layout) = m.forward_logits(&input(&cfg, 2, 0)).unwrap();
        assert_eq!(logits.dims(), &[2, cfg.seq_len(), 12]);
        assert_eq!(layout.total(), 2 + 1 + 3 + 4);
    }

    #[test]
    fn retro_block_requires_source() {
        let cfg = tiny_cfg();
        let store = ParamStore::new(DType::F32, 0);
        let block = TransformerBlock::new(&store, &cfg, 0).unwrap();
        let z = Tensor::zeros((1, 3, 8), DType::F32, &Device::Cpu).unwrap();
        let bias = causal_bias(3, DType::F32, &Device::Cpu).unwrap();
        assert!(block.forward(&z, &bias, None).is_err());
    }

    #[test]
    fn source_embedding_is_local() {
        let cfg = tiny_cfg();
        let m = StoryTransformer::new(cfg, Arc::new(ParamStore::new(DType::F64, 1))).unwrap();
        let a = Tensor::new(&[[0u32, 1, 2, 3]], &Device::Cpu).unwrap();
        let b = Tensor::new(&[[0u32, 1, 4, 3]], &Device::Cpu).unwrap();
        let ea: Vec<Vec<f64>> = m.embed_source(&a).unwrap().0.squeeze(0).unwrap().to_vec2().unwrap();
        let eb: Vec<Vec<f64>> = m.embed_source(&b).unwrap().0.squeeze(0).unwrap().to_vec2().unwrap();
        let changed: Vec<usize> = (0..4).filter(|&i| ea[i] != eb[i]).collect();
        assert_eq!(changed, vec![2]);
        assert!(m.embed_source(&Tensor::new(&[[0u32, 1]], &Device::Cpu).unwrap()).is_err());
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let layout = LayoutSpec { prompt: 0, story: 1, caption: 2, image: 3 };
        let logits = Tensor::zeros((1, 6, 4 + 16), DType::F64, &Device::Cpu).unwrap();
        let cap = Tensor::new(&[[1u32, 2]], &Device::Cpu).unwrap();
        let img = Tensor::new(&[[3u32, 4, 5]], &Device::Cpu).unwrap();
        let l = lm_loss(&logits, &layout, &cap, &img, 4, 16).unwrap();
        let image = l.image.to_scalar::<f64>().unwrap();
        assert!((image - 16f64.ln()).abs() < 1e-12);
        assert!((l.text.to_scalar::<f64>().unwrap() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_logits_give_near_zero_loss() {
        let layout = LayoutSpec { prompt: 0, story: 1, caption: 1, image: 2 };
        let (vt, vi) = (3, 4);
        // targets: caption [2], image [1, 3]
        let mut v = vec![0.0f64; 4 * (vt + vi)];
        v[2] = 100.0; // pos 0 predicts caption[0] = 2
        v[(vt + vi) + vt + 1] = 100.0; // pos 1 predicts image[0] = 1
        v[2 * (vt + vi) + vt + 3] = 100.0; // pos 2 predicts image[1] = 3
        let logits = Tensor::from_vec(v, (1, 4, vt + vi), &Device::Cpu).unwrap();
        let l = lm_loss(
            &logits,
            &layout,
            &Tensor::new(&[[2u32]], &Device::Cpu).unwrap(),
            &Tensor::new(&[[1u32, 3]], &Device::Cpu).unwrap(),
            vt,
            vi,
        )
        .unwrap();
        assert!(l.total.to_scalar::<f64>().unwrap() < 1e-40);
    }

    #[test]
    fn loss_rejects_out_of_vocab() {
        let layout = LayoutSpec { prompt: 0, story: 1, caption: 1, image: 1 };
        let logits = Tensor::zeros((1, 3, 5), DType::F64, &Device::Cpu).unwrap();
        let cap = Tensor::new(&[[1u32]], &Device::Cpu).unwrap();
        let img = Tensor::new(&[[3u32]], &Device::Cpu).unwrap();
        assert!(lm_loss(&logits, &layout, &cap, &img, 2, 3).is_err());
    }

    #[test]
    fn loss_matches_scalar_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let (vt, vi) = (5usize, 6usize);
        let layout = LayoutSpec { prompt: 2, story: 1, caption: 3, image: 4 };
        let b = 2;
        let l = layout.total();
        let vals: Vec<f64> = (0..b * l * (vt + vi)).map(|_| rng.random_range(-3.0..3.0)).collect();
        let cap: Vec<u32> = vec![1, 0, 4, 3, 2, 0];
        let img: Vec<u32> = (0..b * 4).map(|_| rng.random_range(0..vi as u32)).collect();
        let logits = Tensor::from_vec(vals.clone(), (b, l, vt + vi), &Device::Cpu).unwrap();
        let got = lm_loss(
            &logits,
            &layout,
            &Tensor::from_vec(cap.clone(), (b, 3), &Device::Cpu).unwrap(),
            &Tensor::from_vec(img.clone(), (b, 4), &Device::Cpu).unwrap(),
            vt,
            vi,
        )
        .unwrap();

        let row = |bi: usize, pos: usize| &vals[(bi * l + pos) * (vt + vi)..(bi * l + pos + 1) * (vt + vi)];
        let nll = |xs: &[f64], target: usize| {
            let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            lse - xs[target]
        };
        let (mut text_sum, mut text_n, mut img_sum) = (0.0, 0, 0.0);
        for bi in 0..b {
            for i in 0..3 {
                let t = cap[bi * 3 + i];
                if t == PAD_ID {
                    continue;
                }
                text_sum += nll(&row(bi, 3 + i - 1)[..vt], t as usize);
                text_n += 1;
            }
            for i in 0..4 {
                img_sum += nll(&row(bi, 6 + i - 1)[vt..], img[bi * 4 + i] as usize);
            }
        }
        let text = text_sum / text_n as f64;
        let image = img_sum / (b * 4) as f64;
        assert!((got.text.to_scalar::<f64>().unwrap() - text).abs() < 1e-12);
        assert!((got.image.to_scalar::<f64>().unwrap() - image).abs() < 1e-12);
    }

    #[test]
    fn census_counts_retro_blocks() {
        let mut cfg = tiny_cfg();
        cfg.retro_density = Some(1);
        let dense = StoryTransformer::new(cfg.clone(), Arc::new(ParamStore::new(DType::F32, 0))).unwrap();
        cfg.retro_density = Some(3);
        let sparse = StoryTransformer::new(cfg.clone(), Arc::new(ParamStore::new(DType::F32, 0))).unwrap();
        cfg.retro_density = None;
        let none = StoryTransformer::new(cfg, Arc::new(ParamStore::new(DType::F32, 0))).unwrap();
        assert!(dense.census().retro_increase() > sparse.census().retro_increase());
        assert_eq!(none.census().group(ParamGroup::Retro), 0);
    }
}
