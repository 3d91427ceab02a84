//! Conditioning inputs for the story transformer: caption sentence
//! embeddings, the global story encoder, the prompt prefix, and the ordering
//! of sequence segments.

use candle_core::{DType, Device, Tensor, D};

use crate::error::{invalid, shape_err, Error, Result};
use crate::nn::{Embedding, Linear, MultiHeadAttention};
use crate::params::{Init, ParamStore};

/// Fixed sinusoid position table, `(t_max, dim)` row-major.
pub fn sinusoid_table(t_max: usize, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; t_max * dim];
    for pos in 0..t_max {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / dim as f64);
            out[pos * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    out
}

pub fn sinusoid_tensor(t_max: usize, dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    Ok(Tensor::from_vec(sinusoid_table(t_max, dim), (t_max, dim), device)?.to_dtype(dtype)?)
}

/// Bag-of-tokens caption encoder: mean of token embeddings, padding ignored.
#[derive(Debug, Clone)]
pub struct SentenceEncoder {
    embed: Embedding,
    pad_id: u32,
}

impl SentenceEncoder {
    pub fn new(store: &ParamStore, name: &str, vocab: usize, dim: usize, pad_id: u32) -> Result<Self> {
        Ok(Self {
            embed: Embedding::new(store, &format!("{name}.embed"), vocab, dim)?,
            pad_id,
        })
    }

    /// `ids`: (..., N_text) u32 -> (..., dim).
    pub fn forward(&self, ids: &Tensor) -> Result<Tensor> {
        let emb = self.embed.forward(ids)?;
        let mask = ids.ne(self.pad_id)?.to_dtype(emb.dtype())?;
        let summed = emb.broadcast_mul(&mask.unsqueeze(D::Minus1)?)?.sum(D::Minus2)?;
        let count = mask.sum_keepdim(D::Minus1)?.clamp(1.0, f64::INFINITY)?;
        Ok(summed.broadcast_div(&count)?)
    }
}

/// Global story encoder: `bridge(x + attn(x))` with `x = S + S_pos`. The
/// attention is unmasked, so every timestep sees every caption.
#[derive(Debug, Clone)]
pub struct StoryEncoder {
    attn: MultiHeadAttention,
    bridge: Linear,
    positions: Tensor,
    t_max: usize,
    d_sent: usize,
}

impl StoryEncoder {
    pub fn new(
        store: &ParamStore,
        name: &str,
        d_sent: usize,
        d_model: usize,
        n_heads: usize,
        t_max: usize,
    ) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d_sent, n_heads)?,
            bridge: Linear::new(store, &format!("{name}.bridge"), d_sent, d_model)?,
            positions: sinusoid_tensor(t_max, d_sent, store.dtype(), store.device())?,
            t_max,
            d_sent,
        })
    }

    pub fn from_parts(attn: MultiHeadAttention, bridge: Linear, t_max: usize, d_sent: usize, dtype: DType) -> Result<Self> {
        Ok(Self {
            attn,
            bridge,
            positions: sinusoid_tensor(t_max, d_sent, dtype, &Device::Cpu)?,
            t_max,
            d_sent,
        })
    }

    /// `captions`: (B, T, d_sent) -> S_global (B, T, d_model).
    pub fn forward(&self, captions: &Tensor) -> Result<Tensor> {
        let (_, t, d) = captions.dims3()?;
        if t == 0 {
            return invalid("story needs at least one caption");
        }
        if t > self.t_max {
            return invalid(format!("story length {t} exceeds t_max {}", self.t_max));
        }
        if d != self.d_sent {
            return shape_err(format!("caption embedding width {d} != d_sent {}", self.d_sent));
        }
        let x = captions.broadcast_add(&self.positions.narrow(0, 0, t)?)?;
        let mixed = (&x + self.attn.forward(&x, &x, None)?)?;
        self.bridge.forward(&mixed)
    }
}

/// Input-agnostic prompt: `P = P_raw + W2 tanh(W1 P_raw + b1) + b2`.
/// With `W2 = 0, b2 = 0` the network is the identity.
#[derive(Debug, Clone)]
pub struct PromptParameters {
    raw: Tensor,
    fc1: Linear,
    fc2: Linear,
    len: usize,
}

impl PromptParameters {
    pub fn new(store: &ParamStore, len: usize, d_model: usize) -> Result<Option<Self>> {
        if len == 0 {
            return Ok(None);
        }
        let hidden = 4 * d_model;
        Ok(Some(Self {
            raw: store.get("prompt.raw", &[len, d_model], Init::Normal(0.02))?,
            fc1: Linear::new(store, "prompt.mlp.fc1", d_model, hidden)?,
            fc2: Linear::with_init(store, "prompt.mlp.fc2", hidden, d_model, Init::Normal(0.02), true)?,
            len,
        }))
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// P_theta, (P_idx, d_model).
    pub fn make_prompt(&self) -> Result<Tensor> {
        let h = self.fc1.forward(&self.raw)?.tanh()?;
        Ok((&self.raw + self.fc2.forward(&h)?)?)
    }
}

/// `make_prompt` for an optional prompt; an absent prompt yields `(0, d)`.
pub fn make_prompt(params: Option<&PromptParameters>, d_model: usize, dtype: DType) -> Result<Tensor> {
    match params {
        Some(p) => p.make_prompt(),
        None => Ok(Tensor::zeros((0, d_model), dtype, &Device::Cpu)?),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segment {
    Prompt,
    Story,
    Caption,
    Image,
}

/// Segment lengths of one input sequence, in order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayoutSpec {
    pub prompt: usize,
    pub story: usize,
    pub caption: usize,
    pub image: usize,
}

impl LayoutSpec {
    pub fn total(&self) -> usize {
        self.prompt + self.story + self.caption + self.image
    }

    fn segments(&self) -> [(Segment, usize); 4] {
        [
            (Segment::Prompt, self.prompt),
            (Segment::Story, self.story),
            (Segment::Caption, self.caption),
            (Segment::Image, self.image),
        ]
    }

    /// First position of `segment`.
    pub fn start(&self, segment: Segment) -> usize {
        self.segments()
            .iter()
            .take_while(|(s, _)| *s != segment)
            .map(|(_, n)| n)
            .sum()
    }

    pub fn range(&self, segment: Segment) -> std::ops::Range<usize> {
        let start = self.start(segment);
        let len = self.segments().iter().find(|(s, _)| *s == segment).map(|(_, n)| *n).unwrap_or(0);
        start..start + len
    }

    /// Maps a sequence position to its (segment, offset).
    pub fn locate(&self, position: usize) -> Option<(Segment, usize)> {
        let mut start = 0;
        for (seg, len) in self.segments() {
            if position < start + len {
                return Some((seg, position - start));
            }
            start += len;
        }
        None
    }
}

/// Concatenates already-embedded segments as
/// `[prompt | story | caption | image]` for a batch.
///
/// `prompt`: (P, d) shared across the batch; `story`: (B, d) for the current
/// frame; `caption`: (B, N_text, d); `image`: (B, n, d) with `n <= n_img_max`.
pub fn layout_sequence(
    prompt: &Tensor,
    story: Option<&Tensor>,
    caption: &Tensor,
    image: Option<&Tensor>,
    n_text: usize,
    n_img_max: usize,
) -> Result<(Tensor, LayoutSpec)> {
    let (b, nt, d) = caption.dims3()?;
    if nt != n_text {
        return Err(Error::Invalid(format!("caption segment has {nt} rows, expected {n_text}")));
    }
    let (p, pd) = prompt.dims2()?;
    if pd != d {
        return shape_err(format!("prompt width {pd} != {d}"));
    }
    let mut parts = Vec::with_capacity(4);
    if p > 0 {
        parts.push(prompt.unsqueeze(0)?.broadcast_as((b, p, d))?.contiguous()?);
    }
    let mut story_len = 0;
    if let Some(s) = story {
        if s.dims() != [b, d] {
            return shape_err(format!("story vector {:?} != [{b}, {d}]", s.dims()));
        }
        parts.push(s.unsqueeze(1)?);
        story_len = 1;
    }
    parts.push(caption.clone());
    let mut image_len = 0;
    if let Some(img) = image {
        let (ib, n, id) = img.dims3()?;
        if ib != b || id != d {
            return shape_err(format!("image segment {:?} incompatible with batch {b} width {d}", img.dims()));
        }
        if n > n_img_max {
            return Err(Error::Invalid(format!("image segment overflow: {n} > {n_img_max}")));
        }
        if n > 0 {
            parts.push(img.clone());
        }
        image_len = n;
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    let seq = Tensor::cat(&refs, 1)?;
    Ok((seq, LayoutSpec { prompt: p, story: story_len, caption: nt, image: image_len }))
}
