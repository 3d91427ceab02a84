//! Vector-quantized autoencoder mapping frames to token grids and back.
//!
//! The encoder and decoder act patch-wise: each `p x p` patch of the frame is
//! flattened, passed through a two-layer perceptron to a `d_code` latent, and
//! snapped to its nearest codebook row. Quantization uses the straight-through
//! estimator and the codebook is learned by gradient descent.

use std::sync::Arc;

use candle_core::{DType, Device, Tensor, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::TokenizerConfig;
use crate::error::{invalid, shape_err, Error, Result};
use crate::frame::{frames_to_tensor, tensor_to_frames, Frame};
use crate::nn::Linear;
use crate::params::{Init, ParamStore};

pub const CODEBOOK_PARAM: &str = "vq.codebook";

/// Discrete latent vocabulary; row index is the token id.
#[derive(Debug, Clone)]
pub struct Codebook {
    entries: Tensor,
}

impl Codebook {
    pub fn new(entries: Tensor) -> Result<Self> {
        let (n, _) = entries.dims2()?;
        if n < 2 {
            return invalid("codebook needs at least 2 entries");
        }
        let all_finite = entries
            .to_dtype(DType::F64)?
            .flatten_all()?
            .to_vec1::<f64>()?
            .iter()
            .all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::NonFinite("codebook entries".into()));
        }
        Ok(Self { entries })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != d) {
            return shape_err("ragged codebook rows");
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::new(Tensor::from_vec(flat, (rows.len(), d), &Device::Cpu)?)
    }

    pub fn len(&self) -> usize {
        self.entries.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.entries.dims()[1]
    }

    pub fn entries(&self) -> &Tensor {
        &self.entries
    }

    fn flat_f32(&self) -> Result<Vec<f32>> {
        Ok(self.entries.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?)
    }
}

/// A `g x g` grid of codebook indices, stored row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ImageTokenGrid {
    grid: usize,
    indices: Vec<u32>,
}

impl ImageTokenGrid {
    pub fn new(grid: usize, indices: Vec<u32>, vocab: usize) -> Result<Self> {
        if indices.len() != grid * grid {
            return shape_err(format!(
                "token grid {grid}x{grid} needs {} indices, got {}",
                grid * grid,
                indices.len()
            ));
        }
        if let Some(bad) = indices.iter().find(|&&i| i as usize >= vocab) {
            return invalid(format!("token id {bad} outside codebook of size {vocab}"));
        }
        Ok(Self { grid, indices })
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn get(&self, row: usize, col: usize) -> u32 {
        self.indices[row * self.grid + col]
    }
}

/// Row-major nearest-neighbour assignment of `latents` (n x d) to `codes`
/// (V x d) by squared Euclidean distance. Ties resolve to the lowest index.
pub fn nearest_codes(latents: &[f32], codes: &[f32], d: usize) -> Vec<u32> {
    latents
        .chunks(d)
        .map(|z| {
            let mut best = (f64::INFINITY, 0u32);
            for (k, e) in codes.chunks(d).enumerate() {
                let dist: f64 = z
                    .iter()
                    .zip(e)
                    .map(|(a, b)| {
                        let diff = *a as f64 - *b as f64;
                        diff * diff
                    })
                    .sum();
                if dist < best.0 {
                    best = (dist, k as u32);
                }
            }
            best.1
        })
        .collect()
}

/// Maps each cell of a (g, g, d_code) latent grid to its nearest code.
pub fn quantize(latents: &Tensor, codebook: &Codebook) -> Result<ImageTokenGrid> {
    let (g, g2, d) = latents.dims3()?;
    if g != g2 {
        return shape_err(format!("latent grid must be square, got {g}x{g2}"));
    }
    if d != codebook.dim() {
        return shape_err(format!("latent width {d} != codebook width {}", codebook.dim()));
    }
    let flat: Vec<f32> = latents.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    let idx = nearest_codes(&flat, &codebook.flat_f32()?, d);
    ImageTokenGrid::new(g, idx, codebook.len())
}

/// Loss components of one autoencoder step.
#[derive(Debug, Clone)]
pub struct VqLoss {
    pub total: Tensor,
    pub reconstruction: Tensor,
    pub codebook: Tensor,
    pub commitment: Tensor,
}

impl VqLoss {
    pub fn scalars(&self) -> Result<[f64; 4]> {
        let f = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        Ok([
            f(&self.total)?,
            f(&self.reconstruction)?,
            f(&self.codebook)?,
            f(&self.commitment)?,
        ])
    }
}

/// `MSE(image, recon) + mean(|sg(z) - e|^2) + beta * mean(|z - sg(e)|^2)`.
pub fn vqvae_loss(
    image: &Tensor,
    reconstruction: &Tensor,
    latents: &Tensor,
    selected_codes: &Tensor,
    beta: f64,
) -> Result<VqLoss> {
    if image.dims() != reconstruction.dims() {
        return shape_err(format!(
            "image {:?} vs reconstruction {:?}",
            image.dims(),
            reconstruction.dims()
        ));
    }
    if latents.dims() != selected_codes.dims() {
        return shape_err(format!(
            "latents {:?} vs codes {:?}",
            latents.dims(),
            selected_codes.dims()
        ));
    }
    for (name, t) in [("image", image), ("reconstruction", reconstruction), ("latents", latents), ("codes", selected_codes)] {
        let s = t.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !s.is_finite() {
            return Err(Error::NonFinite(format!("vqvae_loss input {name}")));
        }
    }
    let reconstruction = (image - reconstruction)?.sqr()?.mean_all()?;
    let codebook = (latents.detach() - selected_codes)?.sqr()?.mean_all()?;
    let commitment = ((latents - selected_codes.detach())?.sqr()?.mean_all()? * beta)?;
    let total = ((&reconstruction + &codebook)? + &commitment)?;
    Ok(VqLoss { total, reconstruction, codebook, commitment })
}

/// Forward products of a training pass.
#[derive(Debug)]
pub struct VqForward {
    pub latents: Tensor,
    pub codes: Tensor,
    pub indices: Vec<u32>,
    pub reconstruction: Tensor,
    pub loss: VqLoss,
}

#[derive(Debug, Clone)]
pub struct VqVae {
    cfg: TokenizerConfig,
    store: Arc<ParamStore>,
    enc1: Linear,
    enc2: Linear,
    dec1: Linear,
    dec2: Linear,
    codebook: Tensor,
}

impl VqVae {
    pub fn new(cfg: TokenizerConfig, store: Arc<ParamStore>) -> Result<Self> {
        cfg.validate()?;
        let pd = cfg.patch_dim();
        let enc1 = Linear::new(&store, "vq.enc.fc1", pd, cfg.hidden)?;
        let enc2 = Linear::new(&store, "vq.enc.fc2", cfg.hidden, cfg.d_code)?;
        let dec1 = Linear::new(&store, "vq.dec.fc1", cfg.d_code, cfg.hidden)?;
        let dec2 = Linear::new(&store, "vq.dec.fc2", cfg.hidden, pd)?;
        let codebook = store.get(CODEBOOK_PARAM, &[cfg.codebook_size, cfg.d_code], Init::Uniform(1.0 / cfg.codebook_size as f64))?;
        Ok(Self { cfg, store, enc1, enc2, dec1, dec2, codebook })
    }

    pub fn config(&self) -> &TokenizerConfig {
        &self.cfg
    }

    pub fn store(&self) -> &Arc<ParamStore> {
        &self.store
    }

    pub fn codebook(&self) -> Result<Codebook> {
        Codebook::new(self.codebook.clone())
    }

    fn patchify(&self, images: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = images.dims4()?;
        let (g, p) = (self.cfg.grid, self.cfg.patch());
        if h != self.cfg.image_size || w != self.cfg.image_size || c != 3 {
            return shape_err(format!(
                "expected {}x{}x3 images, got {h}x{w}x{c}",
                self.cfg.image_size, self.cfg.image_size
            ));
        }
        Ok(images
            .reshape((b, g, p, g, p, 3))?
            .permute((0, 1, 3, 2, 4, 5))?
            .contiguous()?
            .reshape((b, g * g, p * p * 3))?)
    }

    fn unpatchify(&self, patches: &Tensor) -> Result<Tensor> {
        let (b, _, _) = patches.dims3()?;
        let (g, p) = (self.cfg.grid, self.cfg.patch());
        Ok(patches
            .reshape((b, g, g, p, p, 3))?
            .permute((0, 1, 3, 2, 4, 5))?
            .contiguous()?
            .reshape((b, g * p, g * p, 3))?)
    }

    /// (B, h, w, 3) -> (B, g*g, d_code) continuous latents.
    pub fn encode_batch(&self, images: &Tensor) -> Result<Tensor> {
        let x = self.patchify(images)?;
        Ok(self.enc2.forward(&self.enc1.forward(&x)?.relu()?)?)
    }

    /// (B, g*g, d_code) -> (B, h, w, 3) unclamped reconstruction.
    pub fn decode_latents(&self, latents: &Tensor) -> Result<Tensor> {
        let y = self.dec2.forward(&self.dec1.forward(latents)?.relu()?)?;
        self.unpatchify(&y)
    }

    /// Single frame -> (g, g, d_code).
    pub fn encode(&self, frame: &Frame) -> Result<Tensor> {
        if !frame.is_finite() {
            return Err(Error::NonFinite("encode input".into()));
        }
        let x = frames_to_tensor(&[frame], self.store.dtype(), self.store.device())?;
        let z = self.encode_batch(&x)?;
        Ok(z.reshape((self.cfg.grid, self.cfg.grid, self.cfg.d_code))?)
    }

    pub fn tokenize(&self, frame: &Frame) -> Result<ImageTokenGrid> {
        quantize(&self.encode(frame)?, &self.codebook()?)
    }

    pub fn tokenize_batch(&self, frames: &[&Frame]) -> Result<Vec<ImageTokenGrid>> {
        let mut out = Vec::with_capacity(frames.len());
        let cb = self.codebook()?.flat_f32()?;
        for chunk in frames.chunks(256) {
            let x = frames_to_tensor(chunk, self.store.dtype(), self.store.device())?;
            let z: Vec<f32> = self.encode_batch(&x)?.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
            let idx = nearest_codes(&z, &cb, self.cfg.d_code);
            for cells in idx.chunks(self.cfg.n_tokens()) {
                out.push(ImageTokenGrid::new(self.cfg.grid, cells.to_vec(), self.cfg.codebook_size)?);
            }
        }
        Ok(out)
    }

    fn check_grid(&self, tokens: &ImageTokenGrid) -> Result<()> {
        if tokens.grid() != self.cfg.grid {
            return shape_err(format!("token grid {} != configured {}", tokens.grid(), self.cfg.grid));
        }
        if let Some(bad) = tokens.indices().iter().find(|&&i| i as usize >= self.cfg.codebook_size) {
            return invalid(format!("token id {bad} outside codebook"));
        }
        Ok(())
    }

    /// Token grid -> frame with values clamped to [0, 1].
    pub fn decode(&self, tokens: &ImageTokenGrid) -> Result<Frame> {
        Ok(self.decode_batch(&[tokens])?.remove(0))
    }

    pub fn decode_batch(&self, grids: &[&ImageTokenGrid]) -> Result<Vec<Frame>> {
        let mut out = Vec::with_capacity(grids.len());
        for chunk in grids.chunks(256) {
            let mut ids = Vec::with_capacity(chunk.len() * self.cfg.n_tokens());
            for g in chunk {
                self.check_grid(g)?;
                ids.extend_from_slice(g.indices());
            }
            let ids = Tensor::from_vec(ids, (chunk.len() * self.cfg.n_tokens(),), self.store.device())?;
            let z = self
                .codebook
                .index_select(&ids, 0)?
                .reshape((chunk.len(), self.cfg.n_tokens(), self.cfg.d_code))?;
            let img = self.decode_latents(&z)?.clamp(0.0, 1.0)?;
            out.extend(tensor_to_frames(&img)?);
        }
        Ok(out)
    }

    /// Full differentiable pass with straight-through quantization.
    pub fn forward_train(&self, images: &Tensor) -> Result<VqForward> {
        let mut out = self.forward_patches(&self.patchify(images)?)?;
        out.reconstruction = self.unpatchify(&out.reconstruction)?;
        Ok(out)
    }

    /// [`forward_train`](Self::forward_train) on flattened patches
    /// `(B, N, patch_dim)`; the reconstruction keeps that shape.
    pub fn forward_patches(&self, patches: &Tensor) -> Result<VqForward> {
        let latents = self.enc2.forward(&self.enc1.forward(patches)?.relu()?)?;
        let (b, n, d) = latents.dims3()?;
        let flat: Vec<f32> = latents.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        let cb: Vec<f32> = self.codebook.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        let indices = nearest_codes(&flat, &cb, d);
        let ids = Tensor::from_vec(indices.clone(), (b * n,), self.store.device())?;
        let codes = self.codebook.index_select(&ids, 0)?.reshape((b, n, d))?;
        let straight_through = (&latents + (&codes - &latents)?.detach())?;
        let reconstruction = self.dec2.forward(&self.dec1.forward(&straight_through)?.relu()?)?;
        let loss = vqvae_loss(patches, &reconstruction, &latents, &codes, self.cfg.beta)?;
        Ok(VqForward { latents, codes, indices, reconstruction, loss })
    }

    /// Seeds the codebook with encoder outputs of randomly drawn patches.
    pub fn init_codebook_from(&self, frames: &[Frame], seed: u64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picks: Vec<&Frame> = frames.iter().collect();
        picks.shuffle(&mut rng);
        picks.truncate(256);
        let x = frames_to_tensor(&picks, self.store.dtype(), self.store.device())?;
        self.init_codebook_from_patches(&self.patchify(&x)?, &mut rng)
    }

    fn init_codebook_from_patches(&self, patches: &Tensor, rng: &mut ChaCha8Rng) -> Result<()> {
        let z = self.enc2.forward(&self.enc1.forward(patches)?.relu()?)?;
        let d = self.cfg.d_code;
        let rows = z.reshape(((), d))?;
        let n_rows = rows.dims()[0];
        let mut order: Vec<u32> = (0..n_rows as u32).collect();
        order.shuffle(rng);
        order.truncate(self.cfg.codebook_size);
        while order.len() < self.cfg.codebook_size {
            order.push(order[order.len() % n_rows]);
        }
        let ids = Tensor::from_vec(order, (self.cfg.codebook_size,), self.store.device())?;
        let noise = crate::params::normal_tensor(rng, &[self.cfg.codebook_size, d], 1e-3, self.store.dtype())?;
        self.store.set(CODEBOOK_PARAM, &(rows.index_select(&ids, 0)? + noise)?)?;
        Ok(())
    }

    /// Copies the pixels of cell `cell` of `frame` in patch order.
    fn patch_of(&self, frame: &Frame, cell: usize, out: &mut Vec<f32>) {
        let (g, p) = (self.cfg.grid, self.cfg.patch());
        let (cy, cx) = (cell / g, cell % g);
        for y in 0..p {
            let row = (cy * p + y) * frame.width;
            let start = (row + cx * p) * 3;
            out.extend_from_slice(&frame.data[start..start + p * 3]);
        }
    }

    /// Trains on patches of `frames` with Adam; returns per-step total loss.
    ///
    /// Each step draws `batch_size` patches. Patches of a single flat color
    /// make up at most `flat_fraction` of a batch when enough non-flat ones
    /// exist: on mostly-empty frames, uniform sampling would spend nearly all
    /// capacity on background.
    pub fn train(&self, frames: &[Frame], opts: &VqTrainOptions) -> Result<Vec<f64>> {
        if frames.is_empty() {
            return invalid("no tokenizer training frames");
        }
        let size = self.cfg.image_size;
        if let Some(f) = frames.iter().find(|f| f.height != size || f.width != size) {
            return shape_err(format!("expected {size}x{size} frames, got {}x{}", f.width, f.height));
        }
        let n_tok = self.cfg.n_tokens();
        let pd = self.cfg.patch_dim();
        let mut flat_cells = Vec::new();
        let mut busy_cells = Vec::new();
        let mut buf = Vec::with_capacity(pd);
        for (fi, f) in frames.iter().enumerate() {
            for cell in 0..n_tok {
                buf.clear();
                self.patch_of(f, cell, &mut buf);
                let flat = buf.chunks(3).all(|px| (0..3).all(|c| (px[c] - buf[c]).abs() < 1e-6));
                if flat { flat_cells.push((fi, cell)) } else { busy_cells.push((fi, cell)) }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(1));
        let n_flat = if busy_cells.is_empty() {
            opts.batch_size
        } else if flat_cells.is_empty() {
            0
        } else {
            ((opts.batch_size as f64 * opts.flat_fraction).round() as usize).min(opts.batch_size)
        };
        let draw = |rng: &mut ChaCha8Rng| -> Result<Tensor> {
            let mut data = Vec::with_capacity(opts.batch_size * pd);
            for i in 0..opts.batch_size {
                let pool = if i < n_flat { &flat_cells } else { &busy_cells };
                let (fi, cell) = pool[rng.random_range(0..pool.len())];
                self.patch_of(&frames[fi], cell, &mut data);
            }
            Ok(Tensor::from_vec(data, (1, opts.batch_size, pd), self.store.device())?.to_dtype(self.store.dtype())?)
        };
        let first = draw(&mut rng)?;
        self.init_codebook_from_patches(&first, &mut rng)?;
        let vars: Vec<_> = self.store.vars_where(|n| n.starts_with("vq.")).into_iter().map(|(_, v)| v).collect();
        let mut opt = AdamW::new(vars, ParamsAdamW { lr: opts.lr, weight_decay: 0.0, ..Default::default() })?;
        let mut history = Vec::with_capacity(opts.steps);
        let mut usage = vec![0usize; self.cfg.codebook_size];
        for step in 0..opts.steps {
            let x = if step == 0 { first.clone() } else { draw(&mut rng)? };
            let out = self.forward_patches(&x)?;
            let total = out.loss.total.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !total.is_finite() {
                return Err(Error::NonFinite("tokenizer training loss".into()));
            }
            opt.backward_step(&out.loss.total)?;
            history.push(total);
            for &i in &out.indices {
                usage[i as usize] += 1;
            }
            if opts.reset_every > 0 && (step + 1) % opts.reset_every == 0 {
                self.restart_dead_codes(&usage, &out.latents, &mut rng)?;
                usage.iter_mut().for_each(|u| *u = 0);
            }
        }
        Ok(history)
    }

    /// Moves codes that went unused since the last restart onto the batch
    /// latents that are currently quantized worst. Rare patches (small
    /// characters on a large flat background) otherwise never win a code.
    fn restart_dead_codes(&self, usage: &[usize], latents: &Tensor, rng: &mut ChaCha8Rng) -> Result<usize> {
        let dead: Vec<usize> = (0..usage.len()).filter(|&i| usage[i] == 0).collect();
        if dead.is_empty() {
            return Ok(0);
        }
        let d = self.cfg.d_code;
        let z: Vec<f32> = latents.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        let mut cb: Vec<f32> = self.codebook.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        let assigned = nearest_codes(&z, &cb, d);
        let mut err: Vec<(f32, usize)> = assigned
            .iter()
            .enumerate()
            .map(|(row, &code)| {
                let e = (0..d).map(|k| (z[row * d + k] - cb[code as usize * d + k]).powi(2)).sum::<f32>();
                (e, row)
            })
            .collect();
        err.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        // Walk rows from worst to best, skipping rows already well served by
        // a code restarted this round, so one frequent miss does not absorb
        // every dead code.
        let mut placed: Vec<usize> = Vec::with_capacity(dead.len());
        let mut dead_iter = dead.iter();
        for &(e, row) in &err {
            if e <= 0.0 {
                break;
            }
            let covered = placed.iter().any(|&c| {
                (0..d).map(|k| (z[row * d + k] - cb[c * d + k]).powi(2)).sum::<f32>() < 0.25 * e
            });
            if covered {
                continue;
            }
            let Some(&code) = dead_iter.next() else { break };
            for k in 0..d {
                cb[code * d + k] = z[row * d + k] + 1e-3 * (rng.random::<f32>() - 0.5);
            }
            placed.push(code);
        }
        let t = Tensor::from_vec(cb, (self.cfg.codebook_size, d), self.store.device())?.to_dtype(self.store.dtype())?;
        self.store.set(CODEBOOK_PARAM, &t)?;
        Ok(dead.len())
    }

    /// Mean squared reconstruction error through the full quantized path.
    pub fn reconstruction_mse(&self, frames: &[Frame]) -> Result<f64> {
        let refs: Vec<&Frame> = frames.iter().collect();
        let grids = self.tokenize_batch(&refs)?;
        let grid_refs: Vec<&ImageTokenGrid> = grids.iter().collect();
        let recon = self.decode_batch(&grid_refs)?;
        let total: f64 = frames.iter().zip(&recon).map(|(a, b)| a.mse(b)).sum();
        Ok(total / frames.len().max(1) as f64)
    }

    /// Fraction of codebook rows used by at least one cell of `grids`.
    pub fn codebook_usage(&self, grids: &[ImageTokenGrid]) -> f64 {
        let mut used = vec![false; self.cfg.codebook_size];
        for g in grids {
            for &i in g.indices() {
                used[i as usize] = true;
            }
        }
        used.iter().filter(|&&u| u).count() as f64 / used.len() as f64
    }

    /// Per-element squared-distance table to all codes, (n, V); used by tests.
    pub fn distances(latents: &Tensor, codebook: &Codebook) -> Result<Tensor> {
        let z = latents.reshape(((), codebook.dim()))?;
        let e = codebook.entries().to_dtype(z.dtype())?;
        let zz = z.sqr()?.sum_keepdim(D::Minus1)?;
        let ee = e.sqr()?.sum_keepdim(D::Minus1)?.t()?;
        let ze = z.matmul(&e.t()?)?;
        Ok(zz.broadcast_add(&ee)?.broadcast_sub(&(ze * 2.0)?)?)
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VqTrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Steps between restarts of unused codes; 0 disables restarts.
    pub reset_every: usize,
    /// Share of each batch given to single-color patches.
    pub flat_fraction: f64,
}

impl Default for VqTrainOptions {
    fn default() -> Self {
        Self { steps: 2000, batch_size: 512, lr: 2e-3, seed: 0, reset_every: 100, flat_fraction: 0.25 }
    }
}
