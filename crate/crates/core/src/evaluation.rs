//! Character classifier (also the feature extractor), FID, character
//! metrics, and source correlation.

use std::collections::BTreeMap;
use std::sync::Arc;

use candle_core::{DType, Tensor, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{GeneratedStory, LabelSet, StorySample};
use crate::error::{invalid, shape_err, Error, Result};
use crate::frame::{frames_to_tensor, Frame};
use crate::nn::Linear;
use crate::params::{normal_tensor, ParamStore};

pub const CLASSIFIER_KIND: &str = "char-classifier";
pub const DECISION_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub image_size: usize,
    pub grid: usize,
    pub hidden: usize,
    pub n_labels: usize,
    /// Optimizer steps taken so far; zero means untrained.
    pub trained_steps: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self { image_size: 64, grid: 8, hidden: 64, n_labels: 60, trained_steps: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierTrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Std of Gaussian pixel noise added to training inputs, so scores do
    /// not hinge on exact renders.
    pub noise_std: f64,
}

impl Default for ClassifierTrainOptions {
    fn default() -> Self {
        Self { steps: 1500, batch_size: 64, lr: 3e-3, seed: 0, noise_std: 0.05 }
    }
}

/// Multi-label character classifier. Each grid cell goes through a shared
/// MLP; label logits are max-pooled over cells, and the penultimate features
/// (max- and mean-pooled hidden units) serve as the image descriptor for FID
/// and source correlation.
#[derive(Debug, Clone)]
pub struct CharacterClassifier {
    cfg: ClassifierConfig,
    store: Arc<ParamStore>,
    fc1: Linear,
    fc2: Linear,
    head: Linear,
}

/// Feature matrix `(n, d_feat)` with the id of the extractor that made it.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub features: DMatrix<f64>,
    pub extractor: String,
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }
}

impl CharacterClassifier {
    pub fn new(cfg: ClassifierConfig, store: Arc<ParamStore>) -> Result<Self> {
        if cfg.grid == 0 || cfg.image_size % cfg.grid != 0 || cfg.n_labels == 0 || cfg.hidden == 0 {
            return Err(Error::Config(format!("invalid classifier config {cfg:?}")));
        }
        let cell = cfg.image_size / cfg.grid;
        Ok(Self {
            fc1: Linear::new(&store, "clf.fc1", cell * cell * 3, cfg.hidden)?,
            fc2: Linear::new(&store, "clf.fc2", cfg.hidden, cfg.hidden)?,
            head: Linear::new(&store, "clf.head", cfg.hidden, cfg.n_labels)?,
            cfg,
            store,
        })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.cfg
    }

    pub fn store(&self) -> &Arc<ParamStore> {
        &self.store
    }

    pub fn is_trained(&self) -> bool {
        self.cfg.trained_steps > 0
    }

    /// Registers that trained weights were loaded from elsewhere.
    pub fn mark_trained(&mut self, steps: usize) {
        self.cfg.trained_steps = steps.max(1);
    }

    /// Extractor id derived from the config and training progress.
    pub fn id(&self) -> String {
        format!("{CLASSIFIER_KIND}/h{}/l{}/s{}", self.cfg.hidden, self.cfg.n_labels, self.cfg.trained_steps)
    }

    fn cells(&self, images: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = images.dims4()?;
        let g = self.cfg.grid;
        if h != self.cfg.image_size || w != self.cfg.image_size || c != 3 {
            return shape_err(format!("classifier expects {0}x{0}x3 frames, got {h}x{w}x{c}", self.cfg.image_size));
        }
        let p = h / g;
        let patches = images
            .reshape(&[b, g, p, g, p, c][..])?
            .permute([0, 1, 3, 2, 4, 5])?
            .contiguous()?
            .reshape((b, g * g, p * p * c))?;
        Ok(self.fc2.forward(&self.fc1.forward(&patches)?.relu()?)?.relu()?)
    }

    /// (B, H, W, 3) -> label logits (B, n_labels) and features (B, 2*hidden).
    pub fn forward(&self, images: &Tensor) -> Result<(Tensor, Tensor)> {
        let h = self.cells(images)?;
        let logits = self.head.forward(&h)?.max(1)?;
        let features = Tensor::cat(&[&h.max(1)?, &h.mean(1)?], D::Minus1)?;
        Ok((logits, features))
    }

    fn require_trained(&self) -> Result<()> {
        if !self.is_trained() {
            return Err(Error::NotReady("character classifier has not been trained".into()));
        }
        Ok(())
    }

    /// Trains on frames with exact label sets. Returns per-step losses.
    pub fn train(&mut self, data: &[(Frame, LabelSet)], opts: &ClassifierTrainOptions) -> Result<Vec<f64>> {
        if data.is_empty() {
            return invalid("no classifier training data");
        }
        let vars = self.store.vars_where(|n| n.starts_with("clf.")).into_iter().map(|(_, v)| v).collect();
        let mut opt = AdamW::new(vars, ParamsAdamW { lr: opts.lr, weight_decay: 0.0, ..Default::default() })?;
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut cursor = order.len();
        let mut losses = Vec::with_capacity(opts.steps);
        for _ in 0..opts.steps {
            let mut batch = Vec::with_capacity(opts.batch_size);
            while batch.len() < opts.batch_size.min(data.len()) {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                batch.push(order[cursor]);
                cursor += 1;
            }
            let frames: Vec<&Frame> = batch.iter().map(|&i| &data[i].0).collect();
            let mut x = frames_to_tensor(&frames, self.store.dtype(), self.store.device())?;
            if opts.noise_std > 0.0 {
                let noise = normal_tensor(&mut rng, x.dims(), opts.noise_std, self.store.dtype())?;
                x = (x + noise)?;
            }
            let mut y = vec![0f32; batch.len() * self.cfg.n_labels];
            for (row, &i) in batch.iter().enumerate() {
                for &l in &data[i].1 {
                    if l as usize >= self.cfg.n_labels {
                        return invalid(format!("label {l} outside {} classifier labels", self.cfg.n_labels));
                    }
                    y[row * self.cfg.n_labels + l as usize] = 1.0;
                }
            }
            let y = Tensor::from_vec(y, (batch.len(), self.cfg.n_labels), self.store.device())?.to_dtype(self.store.dtype())?;
            let (logits, _) = self.forward(&x)?;
            // BCE with logits: softplus(x) - y * x.
            let sp = (logits.relu()? + (logits.abs()?.neg()?.exp()? + 1.0)?.log()?)?;
            let loss = (sp - (&y * &logits)?)?.mean_all()?;
            losses.push(loss.to_dtype(DType::F64)?.to_scalar::<f64>()?);
            opt.backward_step(&loss)?;
            self.cfg.trained_steps += 1;
        }
        Ok(losses)
    }

    /// Per-label probabilities, (B, n_labels).
    pub fn probabilities(&self, frames: &[&Frame]) -> Result<Vec<Vec<f64>>> {
        self.require_trained()?;
        let mut out = Vec::with_capacity(frames.len());
        for chunk in frames.chunks(256) {
            let x = frames_to_tensor(chunk, self.store.dtype(), self.store.device())?;
            let (logits, _) = self.forward(&x)?;
            let p = candle_nn::ops::sigmoid(&logits)?.to_dtype(DType::F64)?.to_vec2::<f64>()?;
            out.extend(p);
        }
        Ok(out)
    }

    /// Thresholded predictions.
    pub fn classify(&self, frames: &[&Frame]) -> Result<Vec<LabelSet>> {
        Ok(self
            .probabilities(frames)?
            .into_iter()
            .map(|p| {
                p.iter()
                    .enumerate()
                    .filter(|(_, &v)| v > DECISION_THRESHOLD)
                    .map(|(i, _)| i as u32)
                    .collect()
            })
            .collect())
    }

    pub fn classify_frame(&self, frame: &Frame) -> Result<LabelSet> {
        Ok(self.classify(&[frame])?.remove(0))
    }

    pub fn extract_features(&self, frames: &[&Frame]) -> Result<FeatureSet> {
        self.require_trained()?;
        let d = 2 * self.cfg.hidden;
        let mut rows = Vec::with_capacity(frames.len() * d);
        for chunk in frames.chunks(256) {
            let x = frames_to_tensor(chunk, self.store.dtype(), self.store.device())?;
            let (_, f) = self.forward(&x)?;
            rows.extend(f.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?);
        }
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("classifier features".into()));
        }
        Ok(FeatureSet { features: DMatrix::from_row_slice(frames.len(), d, &rows), extractor: self.id() })
    }
}

fn mean_cov(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.nrows() as f64;
    let mu = x.row_mean().transpose();
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= mu.transpose();
    }
    let cov = centered.transpose() * &centered / (n - 1.0);
    (mu, cov)
}

/// Symmetric PSD square root by eigendecomposition; negative eigenvalues
/// (round-off) are clamped to zero. Returns the root and the most negative
/// eigenvalue seen.
pub fn psd_sqrt(m: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    let root = &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose();
    (root, min)
}

/// Fréchet distance between Gaussians fitted to two feature sets.
///
/// `Tr((S_r S_g)^{1/2})` is computed as `Tr((A S_g A)^{1/2})` with
/// `A = S_r^{1/2}`, which has the same eigenvalues but stays symmetric.
pub fn fid(real: &FeatureSet, generated: &FeatureSet) -> Result<f64> {
    if real.dim() != generated.dim() {
        return shape_err(format!("feature widths differ: {} vs {}", real.dim(), generated.dim()));
    }
    if real.len() < 2 || generated.len() < 2 {
        return invalid("FID needs at least two samples per set");
    }
    let (mu_r, cov_r) = mean_cov(&real.features);
    let (mu_g, cov_g) = mean_cov(&generated.features);
    let (a, min_a) = psd_sqrt(&cov_r);
    let inner = &a * &cov_g * &a;
    let (_, min_inner) = psd_sqrt(&inner);
    let scale = inner.diagonal().iter().map(|v| v.abs()).fold(1e-300, f64::max);
    if min_a < -1e-9 * scale || min_inner < -1e-9 * scale {
        log::warn!("FID: clamped negative eigenvalues ({min_a:.3e}, {min_inner:.3e}) to zero");
    }
    let eig = SymmetricEigen::new((&inner + inner.transpose()) * 0.5);
    let tr_sqrt: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let d = (&mu_r - &mu_g).norm_squared() + cov_r.trace() + cov_g.trace() - 2.0 * tr_sqrt;
    Ok(d.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CharMetrics {
    /// Micro-averaged F1 over per-frame label presence.
    pub char_f1: f64,
    /// Fraction of frames whose predicted set equals the ground truth.
    pub frame_acc: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

pub fn char_metrics(pred: &[LabelSet], gt: &[LabelSet]) -> Result<CharMetrics> {
    if pred.len() != gt.len() {
        return shape_err(format!("{} predictions for {} frames", pred.len(), gt.len()));
    }
    let (mut tp, mut fp, mut fn_, mut exact) = (0, 0, 0, 0);
    for (p, g) in pred.iter().zip(gt) {
        tp += p.intersection(g).count();
        fp += p.difference(g).count();
        fn_ += g.difference(p).count();
        exact += usize::from(p == g);
    }
    let denom = 2 * tp + fp + fn_;
    Ok(CharMetrics {
        // Nothing predicted and nothing present counts as perfect agreement.
        char_f1: if denom == 0 { 1.0 } else { 2.0 * tp as f64 / denom as f64 },
        frame_acc: if gt.is_empty() { 0.0 } else { exact as f64 / gt.len() as f64 },
        tp,
        fp,
        fn_,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub mean: f64,
    pub std: f64,
    /// Pairs used; zero-norm pairs are skipped.
    pub count: usize,
}

/// Cosine similarity of paired feature rows.
pub fn source_correlation(source: &FeatureSet, generated: &FeatureSet) -> Result<Correlation> {
    if source.len() != generated.len() || source.dim() != generated.dim() {
        return shape_err(format!(
            "paired features differ: {}x{} vs {}x{}",
            source.len(),
            source.dim(),
            generated.len(),
            generated.dim()
        ));
    }
    let mut sims = Vec::with_capacity(source.len());
    for (a, b) in source.features.row_iter().zip(generated.features.row_iter()) {
        let (na, nb) = (a.norm(), b.norm());
        if na == 0.0 || nb == 0.0 {
            log::warn!("source correlation: skipping a pair with a zero-norm feature");
            continue;
        }
        sims.push(a.dot(&b) / (na * nb));
    }
    if sims.is_empty() {
        return Ok(Correlation { mean: 0.0, std: 0.0, count: 0 });
    }
    let n = sims.len() as f64;
    let mean = sims.iter().sum::<f64>() / n;
    let std = (sims.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(Correlation { mean, std, count: sims.len() })
}

/// Contents of `eval-report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub checkpoint: String,
    pub fid: f64,
    pub char_f1: Option<f64>,
    pub frame_acc: Option<f64>,
    pub correlation: Correlation,
    pub seeds: BTreeMap<String, u64>,
    pub n_frames: usize,
}

impl EvalReport {
    pub fn write(&self, path: &std::path::Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Scores generated continuations against their ground-truth stories. Only
/// target frames (2..T) enter the metrics; character scores are skipped when
/// `with_chars` is false (datasets without character annotations).
pub fn evaluate_stories(
    classifier: &CharacterClassifier,
    samples: &[&StorySample],
    generated: &[GeneratedStory],
    with_chars: bool,
) -> Result<(f64, Option<CharMetrics>, Correlation)> {
    if samples.len() != generated.len() {
        return shape_err(format!("{} samples vs {} generated stories", samples.len(), generated.len()));
    }
    let mut real = Vec::new();
    let mut fake = Vec::new();
    let mut sources = Vec::new();
    let mut gt = Vec::new();
    for (s, g) in samples.iter().zip(generated) {
        if s.id != g.sample_id || g.frames.len() + 1 != s.len() {
            return invalid(format!("generated story {} does not match sample {}", g.sample_id, s.id));
        }
        for (t, f) in s.target_indices().zip(&g.frames) {
            real.push(&s.frames[t]);
            fake.push(f);
            sources.push(s.source());
            gt.push(s.char_labels[t].clone());
        }
    }
    let real_f = classifier.extract_features(&real)?;
    let fake_f = classifier.extract_features(&fake)?;
    let fid_v = fid(&real_f, &fake_f)?;
    let corr = source_correlation(&classifier.extract_features(&sources)?, &fake_f)?;
    let chars = if with_chars { Some(char_metrics(&classifier.classify(&fake)?, &gt)?) } else { None };
    Ok((fid_v, chars, corr))
}
