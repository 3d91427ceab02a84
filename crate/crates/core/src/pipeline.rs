//! Orchestration shared by the command line and the acceptance suite:
//! experiment configs with dotted overrides, and the tokenizer → classifier →
//! story model → evaluation sequence.

use std::collections::BTreeMap;
use std::sync::Arc;

use candle_core::DType;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::batch::{build_input, tokenize_stories, Example};
use crate::config::{ModelConfig, TokenizerConfig};
use crate::data::synthetic::{random_frames, SyntheticSpec};
use crate::data::{Dataset, GeneratedStory, LabelSet, Split, StorySample, TokenizedStory, Vocab};
use crate::error::{invalid, Error, Result};
use crate::evaluation::{
    char_metrics, evaluate_stories, CharacterClassifier, ClassifierConfig, ClassifierTrainOptions, EvalReport,
};
use crate::frame::Frame;
use crate::gan::{GanBatch, GanConfig, GanStepMetrics, GanTrainOptions, GanTrainer, GanBaseline};
use crate::params::ParamStore;
use crate::sampling::{sample_frames, timestep_seed, SamplerConfig};
use crate::tokenizer::{VqTrainOptions, VqVae};
use crate::training::{evaluate_loss, steps_per_epoch, Mode, TrainRegime, Trainer, TrainableCensus};
use crate::transformer::StoryTransformer;

/// Prompt rows used when prompt mode is requested on a config without any.
pub const DEFAULT_PROMPT_LEN: usize = 8;

/// Story-model training knobs layered over [`TrainRegime`] defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StoryTrainOptions {
    pub mode: Mode,
    pub epochs: usize,
    pub batch_size: usize,
    /// Overrides of the regime's peak learning rates and warmup.
    pub lr_new: Option<f64>,
    pub lr_pretrained: Option<f64>,
    pub warmup_steps: Option<usize>,
    pub seed: u64,
    /// Number of validation stories generated after each epoch to pick the
    /// best epoch by FID; 0 keeps the last epoch.
    pub val_stories: usize,
}

impl Default for StoryTrainOptions {
    fn default() -> Self {
        Self {
            mode: Mode::Finetune,
            epochs: 5,
            batch_size: 16,
            lr_new: None,
            lr_pretrained: None,
            warmup_steps: None,
            seed: 0,
            val_stories: 0,
        }
    }
}

impl StoryTrainOptions {
    pub fn regime(&self, total_steps: usize) -> TrainRegime {
        let mut r = TrainRegime::for_mode(self.mode, total_steps);
        if let Some(lr) = self.lr_new {
            r.lr_new = lr;
        }
        if let Some(lr) = self.lr_pretrained {
            r.lr_pretrained = lr;
        }
        if let Some(w) = self.warmup_steps {
            r.warmup_steps = w.min(total_steps);
        }
        r
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GanRunOptions {
    pub config: GanConfig,
    pub train: GanTrainOptions,
    pub steps: usize,
    pub batch_size: usize,
    /// Steps between FID measurements on the validation split.
    pub eval_every: usize,
}

impl Default for GanRunOptions {
    fn default() -> Self {
        Self { config: GanConfig::default(), train: GanTrainOptions::default(), steps: 500, batch_size: 8, eval_every: 100 }
    }
}

/// Everything a run needs. Serialized verbatim into `run.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub synthetic: SyntheticSpec,
    pub tokenizer: TokenizerConfig,
    pub vq_train: VqTrainOptions,
    /// Random full-palette frames used to fit the tokenizer.
    pub vq_frames: usize,
    pub classifier: ClassifierConfig,
    pub classifier_train: ClassifierTrainOptions,
    pub classifier_frames: usize,
    pub model: ModelConfig,
    pub train: StoryTrainOptions,
    pub sampler: SamplerConfig,
    pub gan: GanRunOptions,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ExperimentConfig {
    /// Desk-scale settings for the synthetic dataset.
    pub fn toy() -> Self {
        // One token per character cell: 16-pixel characters on a 4x4 grid.
        let synthetic = SyntheticSpec { layout_grid: 4, ..SyntheticSpec::default() };
        let tokenizer = TokenizerConfig { image_size: 64, grid: 4, d_code: 32, codebook_size: 256, hidden: 128, beta: 0.25 };
        let model = ModelConfig {
            d_model: 64,
            n_heads: 4,
            n_blocks: 3,
            v_text: 64,
            v_img: tokenizer.codebook_size,
            n_text: 16,
            n_img: tokenizer.n_tokens(),
            // Every block retrieves; sparser placements learned colours far slower.
            retro_density: Some(1),
            prompt_len: 0,
            use_story: true,
            t_max: 8,
            d_sent: 64,
            ffn_mult: 4,
        };
        Self {
            classifier: ClassifierConfig { grid: 4, n_labels: synthetic.n_labels(), ..ClassifierConfig::default() },
            synthetic,
            tokenizer,
            vq_train: VqTrainOptions { steps: 1500, ..VqTrainOptions::default() },
            vq_frames: 4000,
            classifier_train: ClassifierTrainOptions { steps: 1500, ..ClassifierTrainOptions::default() },
            classifier_frames: 4000,
            model,
            train: StoryTrainOptions {
                batch_size: 8,
                lr_new: Some(3e-3),
                lr_pretrained: Some(3e-3),
                warmup_steps: Some(50),
                ..StoryTrainOptions::default()
            },
            sampler: SamplerConfig::greedy(),
            gan: GanRunOptions::default(),
        }
    }

    /// Re-derives fields that must agree across sections.
    pub fn sync(&mut self) {
        if self.train.mode == Mode::Prompt && self.model.prompt_len == 0 {
            self.model.prompt_len = DEFAULT_PROMPT_LEN;
        }
        self.model.v_img = self.tokenizer.codebook_size;
        self.model.n_img = self.tokenizer.n_tokens();
        self.classifier.image_size = self.synthetic.image_size;
        self.classifier.n_labels = self.synthetic.n_labels();
        self.tokenizer.image_size = self.synthetic.image_size;
        self.gan.config.image_size = self.synthetic.image_size;
        self.gan.config.n_text = self.model.n_text;
        self.gan.config.v_text = self.model.v_text;
        self.gan.config.t_max = self.model.t_max;
    }

    pub fn validate(&self) -> Result<()> {
        self.synthetic.validate()?;
        self.tokenizer.validate()?;
        self.model.validate()?;
        self.model.check_tokenizer(&self.tokenizer)?;
        self.gan.config.validate()?;
        if self.train.epochs == 0 || self.train.batch_size == 0 {
            return Err(Error::Config("train.epochs and train.batch_size must be positive".into()));
        }
        if self.synthetic.frames_per_story > self.model.t_max {
            return Err(Error::Config(format!(
                "stories have {} frames but model.t_max is {}",
                self.synthetic.frames_per_story, self.model.t_max
            )));
        }
        Ok(())
    }

    /// Applies `a.b.c=value` overrides. Values parse as JSON when possible and
    /// as plain strings otherwise; keys that do not exist are rejected.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut root = serde_json::to_value(self)?;
        for o in overrides {
            let o = o.as_ref();
            let Some((key, raw)) = o.split_once('=') else {
                return Err(Error::Config(format!("override {o:?} is not of the form key=value")));
            };
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut root, key.trim(), value)?;
        }
        let mut cfg: Self = serde_json::from_value(root).map_err(|e| Error::Config(e.to_string()))?;
        cfg.sync();
        cfg.validate()?;
        Ok(cfg)
    }
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let Value::Object(map) = node else {
            return Err(Error::Config(format!("unknown config key {key:?}: {} is not a section", parts[..i].join("."))));
        };
        let Some(child) = map.get_mut(*part) else {
            return Err(Error::Config(format!("unknown config key {key:?}")));
        };
        node = child;
    }
    *node = value;
    Ok(())
}

/// Vocabulary over the training captions.
pub fn build_vocab(dataset: &Dataset) -> Vocab {
    Vocab::build(dataset.split(Split::Train).flat_map(|s| s.captions.iter().map(String::as_str)))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TokenizerSummary {
    pub final_loss: f64,
    pub heldout_mse: f64,
    pub codebook_usage: f64,
}

/// Fits the tokenizer on random full-palette frames and measures held-out
/// reconstruction error on fresh ones.
pub fn train_tokenizer(cfg: &ExperimentConfig) -> Result<(VqVae, TokenizerSummary)> {
    let seed = cfg.vq_train.seed;
    let frames: Vec<Frame> = random_frames(&cfg.synthetic, cfg.vq_frames, seed)?.into_iter().map(|(f, _)| f).collect();
    let heldout: Vec<Frame> =
        random_frames(&cfg.synthetic, 256, seed ^ 0x5EED)?.into_iter().map(|(f, _)| f).collect();
    train_tokenizer_on(cfg, &frames, &heldout)
}

/// Fits the tokenizer on `frames` and reports reconstruction error on `heldout`.
pub fn train_tokenizer_on(cfg: &ExperimentConfig, frames: &[Frame], heldout: &[Frame]) -> Result<(VqVae, TokenizerSummary)> {
    let vq = VqVae::new(cfg.tokenizer.clone(), Arc::new(ParamStore::new(DType::F32, cfg.vq_train.seed)))?;
    let losses = vq.train(frames, &cfg.vq_train)?;
    let refs: Vec<&Frame> = heldout.iter().collect();
    let grids = vq.tokenize_batch(&refs)?;
    let summary = TokenizerSummary {
        final_loss: losses.last().copied().unwrap_or(f64::NAN),
        heldout_mse: vq.reconstruction_mse(heldout)?,
        codebook_usage: vq.codebook_usage(&grids),
    };
    log::info!("tokenizer: {summary:?}");
    Ok((vq, summary))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassifierSummary {
    pub final_loss: f64,
    /// Micro-F1 on the ground-truth frames of the given stories.
    pub real_f1: f64,
    pub real_frame_acc: f64,
}

/// Trains the character classifier on random frames, then scores it on the
/// real frames of `held_out`.
pub fn train_classifier(cfg: &ExperimentConfig, held_out: &[&StorySample]) -> Result<(CharacterClassifier, ClassifierSummary)> {
    let opts = cfg.classifier_train;
    let mut clf = CharacterClassifier::new(
        ClassifierConfig { trained_steps: 0, ..cfg.classifier.clone() },
        Arc::new(ParamStore::new(DType::F32, opts.seed)),
    )?;
    let data = random_frames(&cfg.synthetic, cfg.classifier_frames, opts.seed.wrapping_add(17))?;
    let losses = clf.train(&data, &opts)?;
    let frames: Vec<&Frame> = held_out.iter().flat_map(|s| s.frames.iter()).collect();
    let gt: Vec<LabelSet> = held_out.iter().flat_map(|s| s.char_labels.iter().cloned()).collect();
    let (real_f1, real_frame_acc) = if frames.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        let m = char_metrics(&clf.classify(&frames)?, &gt)?;
        (m.char_f1, m.frame_acc)
    };
    let summary = ClassifierSummary { final_loss: losses.last().copied().unwrap_or(f64::NAN), real_f1, real_frame_acc };
    log::info!("classifier: {summary:?}");
    Ok((clf, summary))
}

/// Fresh story model with parameters seeded by `seed`.
pub fn new_story_model(cfg: &ModelConfig, seed: u64) -> Result<StoryTransformer> {
    StoryTransformer::new(cfg.clone(), Arc::new(ParamStore::new(DType::F32, seed)))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_fid: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs: Vec<EpochRecord>,
    pub steps: usize,
    pub regime: TrainRegime,
    pub census: TrainableCensus,
    /// Epoch whose parameters the model holds on return (1-based).
    pub selected_epoch: usize,
}

impl TrainSummary {
    pub fn epoch_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }
}

/// Context for picking the best epoch by validation FID.
pub struct Validation<'a> {
    pub classifier: &'a CharacterClassifier,
    pub samples: Vec<&'a StorySample>,
    pub sampler: SamplerConfig,
}

/// Trains `model` on pre-tokenized stories for `opts.epochs` epochs. With a
/// validation context, the parameters of the epoch with the lowest FID are
/// restored at the end.
pub fn train_story_model(
    model: &StoryTransformer,
    vq: &VqVae,
    vocab: &Vocab,
    train: &[TokenizedStory],
    val: &[TokenizedStory],
    opts: &StoryTrainOptions,
    validation: Option<&Validation<'_>>,
) -> Result<TrainSummary> {
    let total = steps_per_epoch(train, opts.batch_size) * opts.epochs;
    let regime = opts.regime(total);
    let mut trainer = Trainer::new(model, regime.clone())?;
    let mut epochs = Vec::with_capacity(opts.epochs);
    let mut best: Option<(f64, usize, BTreeMap<String, candle_core::Tensor>)> = None;
    for epoch in 1..=opts.epochs {
        let train_loss = trainer.train_epoch(train, opts.batch_size, opts.seed.wrapping_add(epoch as u64))?;
        let val_loss = if val.is_empty() { None } else { Some(evaluate_loss(model, val, opts.batch_size)?) };
        let val_fid = match validation {
            Some(v) if !v.samples.is_empty() => {
                let generated = generate_stories(model, vq, vocab, &v.samples, &v.sampler, 64)?;
                let (f, _, _) = evaluate_stories(v.classifier, &v.samples, &generated, false)?;
                Some(f)
            }
            _ => None,
        };
        log::info!("epoch {epoch}: train loss {train_loss:.4}, val loss {val_loss:?}, val fid {val_fid:?}");
        if let Some(f) = val_fid {
            if best.as_ref().is_none_or(|(b, _, _)| f < *b) {
                best = Some((f, epoch, model.store().snapshot()?));
            }
        }
        epochs.push(EpochRecord { epoch, train_loss, val_loss, val_fid });
    }
    let mut selected_epoch = opts.epochs;
    if let Some((_, epoch, snapshot)) = best {
        for (name, t) in &snapshot {
            model.store().set(name, t)?;
        }
        selected_epoch = epoch;
    }
    Ok(TrainSummary { epochs, steps: trainer.step(), census: trainer.census().clone(), regime, selected_epoch })
}

/// Generates continuations of `samples`, packing up to `batch_rows` target
/// timesteps per decoding pass. Results equal per-story generation with the
/// same sampler because each row has its own random stream.
pub fn generate_stories(
    model: &StoryTransformer,
    vq: &VqVae,
    vocab: &Vocab,
    samples: &[&StorySample],
    sampler: &SamplerConfig,
    batch_rows: usize,
) -> Result<Vec<GeneratedStory>> {
    let n_text = model.config().n_text;
    let sources: Vec<&Frame> = samples.iter().map(|s| s.source()).collect();
    let grids = vq.tokenize_batch(&sources)?;
    let mut stories = Vec::with_capacity(samples.len());
    for (s, g) in samples.iter().zip(grids) {
        if s.len() < 2 {
            return invalid(format!("story {} has {} frames; at least 2 required", s.id, s.len()));
        }
        stories.push(TokenizedStory {
            id: s.id.clone(),
            captions: s.captions.iter().map(|c| vocab.encode(c, n_text)).collect(),
            frames: vec![g; s.len()],
            char_labels: s.char_labels.clone(),
        });
    }
    let rows: Vec<(usize, Example<'_>)> =
        stories.iter().enumerate().flat_map(|(i, s)| (1..s.len()).map(move |t| (i, (s, t)))).collect();
    let mut frames: Vec<Vec<Frame>> = vec![Vec::new(); samples.len()];
    for chunk in rows.chunks(batch_rows.max(1)) {
        let batch: Vec<Example<'_>> = chunk.iter().map(|(_, e)| *e).collect();
        let input = build_input(&batch, false, model.store().device())?;
        let seeds: Vec<u64> = batch.iter().map(|&(_, t)| timestep_seed(sampler.seed, t)).collect();
        let grids = sample_frames(model, &input, &seeds, sampler)?;
        let decoded = vq.decode_batch(&grids.iter().collect::<Vec<_>>())?;
        for ((i, _), f) in chunk.iter().zip(decoded) {
            frames[*i].push(f);
        }
    }
    Ok(samples
        .iter()
        .zip(frames)
        .map(|(s, frames)| GeneratedStory { sample_id: s.id.clone(), frames, sampler: sampler.meta() })
        .collect())
}

/// Scores generated stories and assembles the report.
pub fn evaluate(
    classifier: &CharacterClassifier,
    dataset: &str,
    checkpoint: &str,
    samples: &[&StorySample],
    generated: &[GeneratedStory],
    with_chars: bool,
    seeds: BTreeMap<String, u64>,
) -> Result<EvalReport> {
    let (fid, chars, correlation) = evaluate_stories(classifier, samples, generated, with_chars)?;
    Ok(EvalReport {
        dataset: dataset.to_string(),
        checkpoint: checkpoint.to_string(),
        fid,
        char_f1: chars.as_ref().map(|c| c.char_f1),
        frame_acc: chars.as_ref().map(|c| c.frame_acc),
        correlation,
        seeds,
        n_frames: generated.iter().map(|g| g.frames.len()).sum(),
    })
}

/// Tokenizes the stories of one split.
pub fn tokenize_split(vq: &VqVae, vocab: &Vocab, dataset: &Dataset, split: Split, n_text: usize) -> Result<Vec<TokenizedStory>> {
    let samples: Vec<&StorySample> = dataset.split(split).collect();
    tokenize_stories(vq, vocab, &samples, n_text)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GanSummary {
    pub history: Vec<GanStepMetrics>,
    /// (step, validation FID) measurements.
    pub fid_curve: Vec<(usize, f64)>,
}

/// Adversarial training on fixed-length stories of `train`, measuring FID on
/// `val` every `opts.eval_every` steps when a classifier is supplied.
pub fn train_gan(
    gan: &GanBaseline,
    vocab: &Vocab,
    train: &[&StorySample],
    val: &[&StorySample],
    opts: &GanRunOptions,
    classifier: Option<&CharacterClassifier>,
) -> Result<GanSummary> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    if train.is_empty() {
        return invalid("no GAN training stories");
    }
    let mut trainer = GanTrainer::new(gan, &opts.train)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(opts.train.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let mut fid_curve = Vec::new();
    for step in 1..=opts.steps {
        let mut batch = Vec::with_capacity(opts.batch_size);
        while batch.len() < opts.batch_size.min(train.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(train[order[cursor]]);
            cursor += 1;
        }
        let b = GanBatch::from_samples(&batch, vocab, gan.config().n_text, gan.store().dtype())?;
        let m = trainer.train_step(&b)?;
        if !(m.d_total.is_finite() && m.g_total.is_finite()) {
            return Err(Error::NonFinite(format!("GAN losses at step {step}")));
        }
        let due = opts.eval_every > 0 && (step % opts.eval_every == 0 || step == opts.steps);
        if let (true, Some(clf)) = (due, classifier) {
            if !val.is_empty() {
                let generated = val
                    .iter()
                    .map(|s| gan.generate_story(s, vocab, opts.train.seed))
                    .collect::<Result<Vec<_>>>()?;
                let (f, _, _) = evaluate_stories(clf, val, &generated, false)?;
                log::info!("gan step {step}: d {:.4} g {:.4} val fid {f:.3}", m.d_total, m.g_total);
                fid_curve.push((step, f));
            }
        }
    }
    Ok(GanSummary { history: trainer.history.clone(), fid_curve })
}
