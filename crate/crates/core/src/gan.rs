//! Adversarial story-continuation baseline: a marker-conditioned caption
//! encoder, contextual attention over the source frame, a recurrent
//! generator, and per-image and per-story discriminators.

use std::sync::Arc;

use candle_core::{DType, Tensor, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{GeneratedStory, SamplerMeta, StorySample, Vocab};
use crate::error::{invalid, shape_err, Error, Result};
use crate::frame::{frames_to_tensor, tensor_to_frames, Frame};
use crate::nn::{Embedding, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::params::{normal_tensor, Init, ParamGroup, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GanConfig {
    pub image_size: usize,
    /// Spatial cells per side of the generator's feature grid.
    pub grid: usize,
    pub channels: usize,
    pub d_txt: usize,
    pub n_heads: usize,
    pub d_cond: usize,
    pub d_noise: usize,
    pub d_hidden: usize,
    pub disc_channels: usize,
    pub v_text: usize,
    pub n_text: usize,
    pub t_max: usize,
    /// Side of the contextual-attention patches (odd).
    pub patch: usize,
    pub softmax_scale: f64,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            grid: 8,
            channels: 32,
            d_txt: 64,
            n_heads: 4,
            d_cond: 32,
            d_noise: 16,
            d_hidden: 64,
            disc_channels: 32,
            v_text: 64,
            n_text: 16,
            t_max: 8,
            patch: 3,
            softmax_scale: 10.0,
        }
    }
}

impl GanConfig {
    pub fn cell(&self) -> usize {
        self.image_size / self.grid
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.grid == 0 || self.image_size % self.grid != 0 {
            return bad(format!("grid {} must divide image_size {}", self.grid, self.image_size));
        }
        if self.patch % 2 == 0 || self.patch > self.grid {
            return bad(format!("patch {} must be odd and no larger than grid {}", self.patch, self.grid));
        }
        if self.n_heads == 0 || self.d_txt % self.n_heads != 0 {
            return bad(format!("d_txt {} not divisible by n_heads {}", self.d_txt, self.n_heads));
        }
        if [self.channels, self.d_cond, self.d_hidden, self.disc_channels, self.v_text, self.n_text, self.t_max]
            .contains(&0)
        {
            return bad("all GAN dimensions must be positive".into());
        }
        Ok(())
    }
}

/// Zero-norm guard in the patch normalization.
pub const PATCH_EPS: f64 = 1e-8;

/// Extracts every `k x k` patch (zero padded, one per location) from
/// `x`: (B, C, H, W) -> (B, H*W, C*k*k). Patch entries are ordered
/// channel-major, then row, then column of the offset.
pub fn extract_patches(x: &Tensor, k: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let p = k / 2;
    let padded = x.pad_with_zeros(2, p, p)?.pad_with_zeros(3, p, p)?;
    let mut shifted = Vec::with_capacity(k * k);
    for dy in 0..k {
        for dx in 0..k {
            shifted.push(padded.narrow(2, dy, h)?.narrow(3, dx, w)?);
        }
    }
    Ok(Tensor::stack(&shifted, 2)?
        .reshape((b, c * k * k, h * w))?
        .transpose(1, 2)?
        .contiguous()?)
}

/// Inverse placement of [`extract_patches`]: sums each location's patch back
/// onto the grid and divides by `k*k`. (B, H*W, C*k*k) -> (B, C, H, W).
pub fn fold_patches(patches: &Tensor, c: usize, h: usize, w: usize, k: usize) -> Result<Tensor> {
    let (b, n, _) = patches.dims3()?;
    if n != h * w {
        return shape_err(format!("{n} patches for a {h}x{w} grid"));
    }
    let p = k / 2;
    let grid = patches.transpose(1, 2)?.contiguous()?.reshape((b, c, k * k, h, w))?;
    let mut acc: Option<Tensor> = None;
    for dy in 0..k {
        for dx in 0..k {
            let part = grid
                .narrow(2, dy * k + dx, 1)?
                .squeeze(2)?
                .pad_with_zeros(2, dy, k - 1 - dy)?
                .pad_with_zeros(3, dx, k - 1 - dx)?;
            acc = Some(match acc {
                Some(a) => (a + part)?,
                None => part,
            });
        }
    }
    let full = acc.expect("k >= 1");
    Ok((full.narrow(2, p, h)?.narrow(3, p, w)? / (k * k) as f64)?)
}

#[derive(Debug, Clone)]
pub struct ContextualAttention {
    /// Fused representation, target plus copied source patches, (B, C, H, W).
    pub fused: Tensor,
    /// Cosine similarity of each target patch to each source patch,
    /// (B, H_t*W_t, H_s*W_s).
    pub similarity: Tensor,
    /// Softmax over source locations of `scale * similarity`.
    pub attention: Tensor,
}

/// Matches every target patch against every source patch by normalized
/// inner product, attends over source locations with a scaled softmax, and
/// adds the attended source patches back onto the target.
pub fn contextual_attention(target: &Tensor, source: &Tensor, patch: usize, scale: f64) -> Result<ContextualAttention> {
    let (bt, ct, ht, wt) = target.dims4()?;
    let (bs, cs, hs, ws) = source.dims4()?;
    if bt != bs || ct != cs {
        return shape_err(format!("target {:?} and source {:?} differ in batch or channels", target.dims(), source.dims()));
    }
    if patch % 2 == 0 {
        return invalid(format!("patch size {patch} must be odd"));
    }
    if ht.min(wt).min(hs).min(ws) < patch {
        return invalid(format!("grid smaller than patch size {patch}"));
    }
    let tp = extract_patches(target, patch)?;
    let sp = extract_patches(source, patch)?;
    let unit = |x: &Tensor| -> Result<Tensor> {
        let norm = (x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()? + PATCH_EPS)?;
        Ok(x.broadcast_div(&norm)?)
    };
    let similarity = unit(&tp)?.matmul(&unit(&sp)?.t()?.contiguous()?)?;
    let attention = candle_nn::ops::softmax(&(&similarity * scale)?, D::Minus1)?;
    let copied = attention.matmul(&sp)?;
    let fused = (target + fold_patches(&copied, ct, ht, wt, patch)?)?;
    Ok(ContextualAttention { fused, similarity, attention })
}

/// KL divergence of N(mu, exp(logvar)) from N(0, 1), summed over the last
/// dimension and averaged over the rest.
pub fn kl_loss(mu: &Tensor, logvar: &Tensor) -> Result<Tensor> {
    if mu.dims() != logvar.dims() {
        return shape_err(format!("mu {:?} vs logvar {:?}", mu.dims(), logvar.dims()));
    }
    let terms = ((mu.sqr()? + logvar.exp()?)? - 1.0)?.sub(logvar)?;
    Ok((terms.sum(D::Minus1)? * 0.5)?.mean_all()?)
}

/// Numerically stable `log(1 + exp(x))`.
fn softplus(x: &Tensor) -> Result<Tensor> {
    Ok((x.relu()? + ((x.abs()?.neg()?.exp()? + 1.0)?.log()?))?)
}

/// Binary cross-entropy of sigmoid(`logits`) against a constant label.
pub fn bce_with_logits(logits: &Tensor, real: bool) -> Result<Tensor> {
    let x = if real { logits.neg()? } else { logits.clone() };
    Ok(softplus(&x)?.mean_all()?)
}

fn leaky(x: &Tensor) -> Result<Tensor> {
    Ok(x.maximum(&(x * 0.2)?)?)
}

/// (B, H, W, 3) -> (B, g*g, p*p*3) with `p = H / g`.
fn patchify(images: &Tensor, grid: usize) -> Result<Tensor> {
    let (b, h, w, c) = images.dims4()?;
    let p = h / grid;
    if h != w || p * grid != h {
        return shape_err(format!("image {h}x{w} not divisible into a {grid}x{grid} grid"));
    }
    Ok(images
        .reshape(&[b, grid, p, grid, p, c][..])?
        .permute([0, 1, 3, 2, 4, 5])?
        .contiguous()?
        .reshape((b, grid * grid, p * p * c))?)
}

fn unpatchify(patches: &Tensor, grid: usize, p: usize) -> Result<Tensor> {
    let (b, _, _) = patches.dims3()?;
    Ok(patches
        .reshape(&[b, grid, grid, p, p, 3][..])?
        .permute([0, 1, 3, 2, 4, 5])?
        .contiguous()?
        .reshape((b, grid * p, grid * p, 3))?)
}

/// Transformer caption encoder. All captions of a story are concatenated
/// after a leading summary token; a learned marker is added to the tokens
/// of the caption being generated. The summary token's output is `h0`.
#[derive(Debug, Clone)]
pub struct CaptionEncoder {
    embed: Embedding,
    pos: Tensor,
    cls: Tensor,
    marker: Tensor,
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    ffn: FeedForward,
    ln_out: LayerNorm,
}

impl CaptionEncoder {
    pub fn new(store: &ParamStore, cfg: &GanConfig) -> Result<Self> {
        let d = cfg.d_txt;
        Ok(Self {
            embed: Embedding::new(store, "gen.text.embed", cfg.v_text, d)?,
            pos: store.get("gen.text.pos", &[cfg.t_max * cfg.n_text, d], Init::Normal(0.02))?,
            cls: store.get("gen.text.cls", &[1, d], Init::Normal(0.02))?,
            marker: store.get("gen.text.marker", &[1, d], Init::Normal(0.5))?,
            ln1: LayerNorm::new(store, "gen.text.ln1", d)?,
            attn: MultiHeadAttention::new(store, "gen.text.attn", d, cfg.n_heads)?,
            ln2: LayerNorm::new(store, "gen.text.ln2", d)?,
            ffn: FeedForward::new(store, "gen.text.ffn", d, 2 * d)?,
            ln_out: LayerNorm::new(store, "gen.text.ln_out", d)?,
        })
    }

    /// `captions`: (B, T, N_text) u32; `t`: 0-based index of the marked
    /// caption. Returns `h0`, (B, d_txt).
    pub fn encode(&self, captions: &Tensor, t: usize) -> Result<Tensor> {
        let (b, n_cap, n) = captions.dims3()?;
        if n_cap == 0 {
            return invalid("empty caption list");
        }
        if t >= n_cap {
            return invalid(format!("marked caption {t} outside story of {n_cap}"));
        }
        let len = n_cap * n;
        if len > self.pos.dims()[0] {
            return invalid(format!("{n_cap} captions of {n} tokens exceed the encoder's {} positions", self.pos.dims()[0]));
        }
        let d = self.cls.dims()[1];
        let flat = captions.reshape((b, len))?;
        let mut marks = vec![0f32; len];
        marks[t * n..(t + 1) * n].iter_mut().for_each(|m| *m = 1.0);
        let marks = Tensor::from_vec(marks, (len, 1), captions.device())?.to_dtype(self.cls.dtype())?;
        let tokens = self
            .embed
            .forward(&flat)?
            .broadcast_add(&self.pos.narrow(0, 0, len)?)?
            .broadcast_add(&marks.broadcast_mul(&self.marker)?)?;
        let cls = self.cls.unsqueeze(0)?.broadcast_as((b, 1, d))?.contiguous()?;
        let x = Tensor::cat(&[&cls, &tokens], 1)?;
        // Padding keys are hidden; the summary token always remains visible.
        let mut key_bias = vec![0f32];
        let ids: Vec<u32> = flat.flatten_all()?.to_vec1()?;
        let mut bias = Vec::with_capacity(b * (len + 1));
        for row in ids.chunks(len) {
            key_bias.truncate(1);
            key_bias.extend(row.iter().map(|&i| if i == Vocab::PAD { f32::NEG_INFINITY } else { 0.0 }));
            bias.extend_from_slice(&key_bias);
        }
        let bias = Tensor::from_vec(bias, (b, 1, 1, len + 1), captions.device())?.to_dtype(self.cls.dtype())?;
        let h = self.ln1.forward(&x)?;
        let x = (&x + self.attn.forward(&h, &h, Some(&bias))?)?;
        let x = (&x + self.ffn.forward(&self.ln2.forward(&x)?)?)?;
        Ok(self.ln_out.forward(&x.narrow(1, 0, 1)?.squeeze(1)?)?)
    }
}

#[derive(Debug, Clone)]
struct GruCell {
    gates: Linear,
    hidden_r: Linear,
    candidate: Linear,
}

impl GruCell {
    fn new(store: &ParamStore, name: &str, d_in: usize, d_h: usize) -> Result<Self> {
        Ok(Self {
            gates: Linear::new(store, &format!("{name}.gates"), d_in + d_h, 2 * d_h)?,
            hidden_r: Linear::new(store, &format!("{name}.hidden"), d_h, d_h)?,
            candidate: Linear::new(store, &format!("{name}.candidate"), d_in, d_h)?,
        })
    }

    fn forward(&self, x: &Tensor, h: &Tensor) -> Result<Tensor> {
        let d_h = h.dim(D::Minus1)?;
        let g = candle_nn::ops::sigmoid(&self.gates.forward(&Tensor::cat(&[x, h], D::Minus1)?)?)?;
        let r = g.narrow(D::Minus1, 0, d_h)?;
        let z = g.narrow(D::Minus1, d_h, d_h)?;
        let n = (self.candidate.forward(x)? + (r * self.hidden_r.forward(h)?)?)?.tanh()?;
        let one_minus = z.affine(-1.0, 1.0)?;
        Ok(((one_minus * n)? + (z * h)?)?)
    }
}

/// Encoder + generator, every parameter under `gen.`.
#[derive(Debug, Clone)]
pub struct Generator {
    cfg: GanConfig,
    text: CaptionEncoder,
    mu: Linear,
    logvar: Linear,
    source_embed: Linear,
    init_hidden: Linear,
    gru: GruCell,
    to_grid: Linear,
    dec1: Linear,
    dec2: Linear,
}

/// Output of one generator pass over a batch of stories.
#[derive(Debug, Clone)]
pub struct GeneratorOutput {
    /// (B, T-1, H, W, 3) in [0, 1].
    pub frames: Tensor,
    /// Caption conditioning per target frame, (B, T-1, d_cond).
    pub cond: Tensor,
    pub mu: Tensor,
    pub logvar: Tensor,
}

impl Generator {
    pub fn new(store: &ParamStore, cfg: &GanConfig) -> Result<Self> {
        let c = cfg.channels;
        let cell = cfg.cell();
        Ok(Self {
            cfg: cfg.clone(),
            text: CaptionEncoder::new(store, cfg)?,
            mu: Linear::new(store, "gen.cond.mu", cfg.d_txt, cfg.d_cond)?,
            logvar: Linear::with_init(store, "gen.cond.logvar", cfg.d_txt, cfg.d_cond, Init::Normal(0.01), true)?,
            source_embed: Linear::new(store, "gen.source.embed", cell * cell * 3, c)?,
            init_hidden: Linear::new(store, "gen.rnn.init", c, cfg.d_hidden)?,
            gru: GruCell::new(store, "gen.rnn.cell", cfg.d_cond + cfg.d_noise, cfg.d_hidden)?,
            to_grid: Linear::new(store, "gen.grid", cfg.d_hidden, c * cfg.grid * cfg.grid)?,
            dec1: Linear::new(store, "gen.dec1", c, 4 * c)?,
            dec2: Linear::new(store, "gen.dec2", 4 * c, cell * cell * 3)?,
        })
    }

    pub fn caption_encoder(&self) -> &CaptionEncoder {
        &self.text
    }

    /// Source frame -> (B, C, g, g) feature grid.
    pub fn source_features(&self, source: &Tensor) -> Result<Tensor> {
        let g = self.cfg.grid;
        let f = self.source_embed.forward(&patchify(source, g)?)?.relu()?;
        let b = f.dim(0)?;
        Ok(f.transpose(1, 2)?.contiguous()?.reshape((b, self.cfg.channels, g, g))?)
    }

    /// Generates frames 1..T for every story. `captions`: (B, T, N_text);
    /// `source`: (B, H, W, 3).
    pub fn forward(&self, captions: &Tensor, source: &Tensor, rng: &mut ChaCha8Rng) -> Result<GeneratorOutput> {
        let (b, t, _) = captions.dims3()?;
        if t < 2 {
            return invalid(format!("stories need at least 2 frames, got {t}"));
        }
        let dtype = source.dtype();
        let (g, c, cell) = (self.cfg.grid, self.cfg.channels, self.cfg.cell());
        let src = self.source_features(source)?;
        let pooled = src.flatten_from(2)?.mean(D::Minus1)?;
        let mut hidden = self.init_hidden.forward(&pooled)?.tanh()?;
        let (mut frames, mut conds, mut mus, mut logvars) = (vec![], vec![], vec![], vec![]);
        for step in 1..t {
            let h0 = self.text.encode(captions, step)?;
            let mu = self.mu.forward(&h0)?;
            let logvar = self.logvar.forward(&h0)?;
            let eps = normal_tensor(rng, &[b, self.cfg.d_cond], 1.0, dtype)?;
            let cond = (&mu + (logvar.affine(0.5, 0.0)?.exp()? * eps)?)?;
            let noise = normal_tensor(rng, &[b, self.cfg.d_noise], 1.0, dtype)?;
            hidden = self.gru.forward(&Tensor::cat(&[&cond, &noise], D::Minus1)?, &hidden)?;
            let target = self.to_grid.forward(&hidden)?.reshape((b, c, g, g))?;
            let fused = contextual_attention(&target, &src, self.cfg.patch, self.cfg.softmax_scale)?.fused;
            let cells = fused.flatten_from(2)?.transpose(1, 2)?.contiguous()?;
            let pix = candle_nn::ops::sigmoid(&self.dec2.forward(&self.dec1.forward(&cells)?.relu()?)?)?;
            frames.push(unpatchify(&pix, g, cell)?);
            conds.push(cond);
            mus.push(mu);
            logvars.push(logvar);
        }
        Ok(GeneratorOutput {
            frames: Tensor::stack(&frames, 1)?,
            cond: Tensor::stack(&conds, 1)?,
            mu: Tensor::stack(&mus, 1)?,
            logvar: Tensor::stack(&logvars, 1)?,
        })
    }
}

/// Caption-conditioned per-frame discriminator (`disc_img.`).
#[derive(Debug, Clone)]
pub struct ImageDiscriminator {
    grid: usize,
    patch: Linear,
    joint: Linear,
    out: Linear,
}

impl ImageDiscriminator {
    pub fn new(store: &ParamStore, cfg: &GanConfig) -> Result<Self> {
        let (cd, cell) = (cfg.disc_channels, cfg.cell());
        Ok(Self {
            grid: cfg.grid,
            patch: Linear::new(store, "disc_img.patch", cell * cell * 3, cd)?,
            joint: Linear::new(store, "disc_img.joint", cd + cfg.d_cond, cd)?,
            out: Linear::new(store, "disc_img.out", cd, 1)?,
        })
    }

    /// `frames`: (N, H, W, 3); `cond`: (N, d_cond). Returns logits (N,).
    pub fn forward(&self, frames: &Tensor, cond: &Tensor) -> Result<Tensor> {
        let f = leaky(&self.patch.forward(&patchify(frames, self.grid)?)?)?;
        let (n, cells, _) = f.dims3()?;
        let c = cond.unsqueeze(1)?.broadcast_as((n, cells, cond.dim(1)?))?.contiguous()?;
        let j = leaky(&self.joint.forward(&Tensor::cat(&[&f, &c], D::Minus1)?)?)?;
        Ok(self.out.forward(&j.mean(1)?)?.squeeze(1)?)
    }
}

/// Story discriminator (`disc_story.`): per-frame features followed by a
/// width-3 temporal convolution, so the score depends on frame order.
#[derive(Debug, Clone)]
pub struct StoryDiscriminator {
    grid: usize,
    patch: Linear,
    temporal: Linear,
    out: Linear,
}

impl StoryDiscriminator {
    pub fn new(store: &ParamStore, cfg: &GanConfig) -> Result<Self> {
        let (cd, cell) = (cfg.disc_channels, cfg.cell());
        Ok(Self {
            grid: cfg.grid,
            patch: Linear::new(store, "disc_story.patch", cell * cell * 3, cd)?,
            temporal: Linear::new(store, "disc_story.temporal", 3 * (cd + cfg.d_cond), cd)?,
            out: Linear::new(store, "disc_story.out", cd, 1)?,
        })
    }

    /// `frames`: (B, T', H, W, 3); `cond`: (B, T', d_cond). Returns (B,).
    pub fn forward(&self, frames: &Tensor, cond: &Tensor) -> Result<Tensor> {
        let (b, t, h, w, c) = frames.dims5()?;
        let f = leaky(&self.patch.forward(&patchify(&frames.reshape((b * t, h, w, c))?, self.grid)?)?)?;
        let f = f.mean(1)?.reshape((b, t, ()))?;
        let x = Tensor::cat(&[&f, cond], D::Minus1)?;
        let padded = x.pad_with_zeros(1, 1, 1)?;
        let window = Tensor::cat(
            &[&padded.narrow(1, 0, t)?, &padded.narrow(1, 1, t)?, &padded.narrow(1, 2, t)?],
            D::Minus1,
        )?;
        let y = leaky(&self.temporal.forward(&window)?)?;
        Ok(self.out.forward(&y.mean(1)?)?.squeeze(1)?)
    }
}

/// Per-term losses of one step; all detached scalars.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GanLosses {
    pub kl: f64,
    pub img: f64,
    pub story: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GanStepMetrics {
    pub step: usize,
    pub d: GanLosses,
    pub g: GanLosses,
    pub d_total: f64,
    pub g_total: f64,
}

/// One batch: captions (B, T, N_text) u32 and frames (B, T, H, W, 3).
#[derive(Debug, Clone)]
pub struct GanBatch {
    pub captions: Tensor,
    pub frames: Tensor,
}

impl GanBatch {
    pub fn from_samples(samples: &[&StorySample], vocab: &Vocab, n_text: usize, dtype: DType) -> Result<Self> {
        let Some(first) = samples.first() else {
            return invalid("empty batch");
        };
        let t = first.len();
        if samples.iter().any(|s| s.len() != t) {
            return invalid("all stories in a batch must have the same length");
        }
        let ids: Vec<u32> = samples
            .iter()
            .flat_map(|s| s.captions.iter().flat_map(|c| vocab.encode(c, n_text)))
            .collect();
        let frames: Vec<&Frame> = samples.iter().flat_map(|s| s.frames.iter()).collect();
        let f = frames_to_tensor(&frames, dtype, &candle_core::Device::Cpu)?;
        let (_, h, w, c) = f.dims4()?;
        Ok(Self {
            captions: Tensor::from_vec(ids, (samples.len(), t, n_text), &candle_core::Device::Cpu)?,
            frames: f.reshape((samples.len(), t, h, w, c))?,
        })
    }

    fn source(&self) -> Result<Tensor> {
        Ok(self.frames.narrow(1, 0, 1)?.squeeze(1)?)
    }

    fn targets(&self) -> Result<Tensor> {
        let t = self.frames.dim(1)?;
        Ok(self.frames.narrow(1, 1, t - 1)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GanTrainOptions {
    pub lr_g: f64,
    pub lr_d: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
}

impl Default for GanTrainOptions {
    fn default() -> Self {
        Self { lr_g: 1e-4, lr_d: 1e-5, beta1: 0.5, beta2: 0.999, seed: 0 }
    }
}

/// The full adversarial model over one parameter store.
#[derive(Debug, Clone)]
pub struct GanBaseline {
    cfg: GanConfig,
    store: Arc<ParamStore>,
    pub generator: Generator,
    pub image_disc: ImageDiscriminator,
    pub story_disc: StoryDiscriminator,
}

impl GanBaseline {
    pub fn new(cfg: GanConfig, store: Arc<ParamStore>) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            generator: Generator::new(&store, &cfg)?,
            image_disc: ImageDiscriminator::new(&store, &cfg)?,
            story_disc: StoryDiscriminator::new(&store, &cfg)?,
            cfg,
            store,
        })
    }

    pub fn config(&self) -> &GanConfig {
        &self.cfg
    }

    pub fn store(&self) -> &Arc<ParamStore> {
        &self.store
    }

    /// Discriminator losses on real targets and detached generator output.
    pub fn discriminator_losses(&self, real: &Tensor, fake: &Tensor, cond: &Tensor) -> Result<(Tensor, GanLosses)> {
        let (b, t, h, w, c) = real.dims5()?;
        let flat_cond = cond.reshape((b * t, ()))?;
        let ri = self.image_disc.forward(&real.reshape((b * t, h, w, c))?, &flat_cond)?;
        let fi = self.image_disc.forward(&fake.reshape((b * t, h, w, c))?, &flat_cond)?;
        let img = (bce_with_logits(&ri, true)? + bce_with_logits(&fi, false)?)?;
        let rs = self.story_disc.forward(real, cond)?;
        let fs = self.story_disc.forward(fake, cond)?;
        let story = (bce_with_logits(&rs, true)? + bce_with_logits(&fs, false)?)?;
        let total = (&img + &story)?;
        Ok((total, GanLosses { kl: 0.0, img: scalar(&img)?, story: scalar(&story)? }))
    }

    fn generator_losses(&self, out: &GeneratorOutput) -> Result<(Tensor, GanLosses)> {
        let (b, t, h, w, c) = out.frames.dims5()?;
        let cond = out.cond.detach();
        let fi = self.image_disc.forward(&out.frames.reshape((b * t, h, w, c))?, &cond.reshape((b * t, ()))?)?;
        let img = bce_with_logits(&fi, true)?;
        let story = bce_with_logits(&self.story_disc.forward(&out.frames, &cond)?, true)?;
        let kl = kl_loss(&out.mu, &out.logvar)?;
        let total = ((&img + &story)? + &kl)?;
        Ok((total, GanLosses { kl: scalar(&kl)?, img: scalar(&img)?, story: scalar(&story)? }))
    }

    /// Generates frames 2..T of `sample`.
    pub fn generate_story(&self, sample: &StorySample, vocab: &Vocab, seed: u64) -> Result<GeneratedStory> {
        if sample.len() < 2 {
            return invalid(format!("story {} has {} frames; at least 2 required", sample.id, sample.len()));
        }
        let batch = GanBatch::from_samples(&[sample], vocab, self.cfg.n_text, self.store.dtype())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = self.generator.forward(&batch.captions, &batch.source()?, &mut rng)?;
        let frames = tensor_to_frames(&out.frames.squeeze(0)?.clamp(0.0, 1.0)?)?;
        Ok(GeneratedStory {
            sample_id: sample.id.clone(),
            frames,
            sampler: SamplerMeta { seed, temperature: 0.0, top_k: 0 },
        })
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Alternating optimizer: discriminators first, then the generator. The two
/// optimizers own disjoint variable sets.
pub struct GanTrainer<'m> {
    model: &'m GanBaseline,
    opt_g: AdamW,
    opt_d: AdamW,
    rng: ChaCha8Rng,
    step: usize,
    pub history: Vec<GanStepMetrics>,
}

impl<'m> GanTrainer<'m> {
    pub fn new(model: &'m GanBaseline, opts: &GanTrainOptions) -> Result<Self> {
        let params = |lr| ParamsAdamW { lr, beta1: opts.beta1, beta2: opts.beta2, eps: 1e-8, weight_decay: 0.0 };
        let pick = |groups: &[ParamGroup]| {
            model
                .store
                .vars()
                .into_iter()
                .filter(|(n, _)| groups.contains(&ParamGroup::of(n)))
                .map(|(_, v)| v)
                .collect::<Vec<_>>()
        };
        Ok(Self {
            opt_g: AdamW::new(pick(&[ParamGroup::Generator]), params(opts.lr_g))?,
            opt_d: AdamW::new(pick(&[ParamGroup::ImageDisc, ParamGroup::StoryDisc]), params(opts.lr_d))?,
            model,
            rng: ChaCha8Rng::seed_from_u64(opts.seed),
            step: 0,
            history: Vec::new(),
        })
    }

    /// Updates only the discriminators.
    pub fn d_step(&mut self, batch: &GanBatch) -> Result<(f64, GanLosses)> {
        let out = self.model.generator.forward(&batch.captions, &batch.source()?, &mut self.rng)?;
        let (loss, parts) =
            self.model
                .discriminator_losses(&batch.targets()?, &out.frames.detach(), &out.cond.detach())?;
        let total = scalar(&loss)?;
        if !total.is_finite() {
            return Err(Error::NonFinite(format!("discriminator loss at step {}", self.step)));
        }
        self.opt_d.backward_step(&loss)?;
        Ok((total, parts))
    }

    /// Updates only the generator (and caption encoder).
    pub fn g_step(&mut self, batch: &GanBatch) -> Result<(f64, GanLosses)> {
        let out = self.model.generator.forward(&batch.captions, &batch.source()?, &mut self.rng)?;
        let (loss, parts) = self.model.generator_losses(&out)?;
        let total = scalar(&loss)?;
        if !total.is_finite() {
            return Err(Error::NonFinite(format!("generator loss at step {}", self.step)));
        }
        self.opt_g.backward_step(&loss)?;
        Ok((total, parts))
    }

    pub fn train_step(&mut self, batch: &GanBatch) -> Result<GanStepMetrics> {
        let (d_total, d) = self.d_step(batch)?;
        let (g_total, g) = self.g_step(batch)?;
        let m = GanStepMetrics { step: self.step, d, g, d_total, g_total };
        self.step += 1;
        self.history.push(m);
        Ok(m)
    }
}
