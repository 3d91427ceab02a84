//! The synthetic end-to-end experiment shared by the direction-of-effect
//! criteria. One tokenizer and one classifier serve every story model.

use std::time::{Duration, Instant};

use retroframe_core::data::synthetic::{generate_synthetic_dataset, is_unseen_label};
use retroframe_core::evaluation::CharacterClassifier;
use retroframe_core::pipeline::{
    build_vocab, evaluate, generate_stories, new_story_model, tokenize_split, train_classifier, train_tokenizer,
    ClassifierSummary, ExperimentConfig, TokenizerSummary, TrainSummary,
};
use retroframe_core::{Dataset, Split, StorySample, VqVae};

pub const SEEDS: [u64; 3] = [0, 1, 2];

pub struct Shared {
    pub cfg: ExperimentConfig,
    pub dataset: Dataset,
    pub vq: VqVae,
    pub tokenizer: TokenizerSummary,
    pub classifier: CharacterClassifier,
    pub classifier_summary: ClassifierSummary,
    pub setup_time: Duration,
}

#[derive(Debug, Clone)]
pub struct Run {
    pub seed: u64,
    pub retro: bool,
    pub train: TrainSummary,
    pub test_char_f1: f64,
    pub test_fid: f64,
    pub correlation: f64,
    pub val_fid: f64,
    pub unseen_char_f1: f64,
    pub unseen_stories: usize,
    pub elapsed: Duration,
}

pub fn setup() -> Shared {
    let t0 = Instant::now();
    let cfg = ExperimentConfig::toy();
    cfg.validate().unwrap();
    let dataset = generate_synthetic_dataset(&cfg.synthetic).unwrap();
    let (vq, tokenizer) = train_tokenizer(&cfg).unwrap();
    let test: Vec<&StorySample> = dataset.split(Split::Test).collect();
    let (classifier, classifier_summary) = train_classifier(&cfg, &test).unwrap();
    Shared { cfg, dataset, vq, tokenizer, classifier, classifier_summary, setup_time: t0.elapsed() }
}

impl Shared {
    pub fn run(&self, seed: u64, retro: bool) -> Run {
        let t0 = Instant::now();
        let cfg = &self.cfg;
        let vocab = build_vocab(&self.dataset);
        let train = tokenize_split(&self.vq, &vocab, &self.dataset, Split::Train, cfg.model.n_text).unwrap();
        let val = tokenize_split(&self.vq, &vocab, &self.dataset, Split::Val, cfg.model.n_text).unwrap();
        let mut mc = cfg.model.clone();
        if !retro {
            mc.retro_density = None;
        }
        let model = new_story_model(&mc, seed).unwrap();
        let mut opts = cfg.train.clone();
        opts.seed = seed;
        let train = retroframe_core::pipeline::train_story_model(&model, &self.vq, &vocab, &train, &val, &opts, None).unwrap();

        let test: Vec<&StorySample> = self.dataset.split(Split::Test).collect();
        let generated = generate_stories(&model, &self.vq, &vocab, &test, &cfg.sampler, 64).unwrap();
        let report = evaluate(&self.classifier, "synthetic", "toy", &test, &generated, true, Default::default()).unwrap();

        let unseen_idx: Vec<usize> = test
            .iter()
            .enumerate()
            .filter(|(_, s)| s.char_labels.iter().flatten().any(|&l| is_unseen_label(&cfg.synthetic, l)))
            .map(|(i, _)| i)
            .collect();
        let unseen: Vec<&StorySample> = unseen_idx.iter().map(|&i| test[i]).collect();
        let unseen_gen: Vec<_> = unseen_idx.iter().map(|&i| generated[i].clone()).collect();
        let unseen_report =
            evaluate(&self.classifier, "synthetic", "toy", &unseen, &unseen_gen, true, Default::default()).unwrap();

        let val_samples: Vec<&StorySample> = self.dataset.split(Split::Val).collect();
        let val_generated = generate_stories(&model, &self.vq, &vocab, &val_samples, &cfg.sampler, 64).unwrap();
        let val_report =
            evaluate(&self.classifier, "synthetic", "toy", &val_samples, &val_generated, false, Default::default()).unwrap();

        Run {
            seed,
            retro,
            train,
            test_char_f1: report.char_f1.unwrap(),
            test_fid: report.fid,
            correlation: report.correlation.mean,
            val_fid: val_report.fid,
            unseen_char_f1: unseen_report.char_f1.unwrap(),
            unseen_stories: unseen.len(),
            elapsed: t0.elapsed(),
        }
    }
}
