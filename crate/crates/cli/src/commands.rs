use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use retroframe_core::checkpoint::{
    load_classifier, load_gan, load_model, load_tokenizer, read_checkpoint, save_classifier, save_gan, save_tokenizer,
    Bundle, ModelCard, MODEL_KIND,
};
use retroframe_core::data::synthetic::generate_synthetic_dataset;
use retroframe_core::data::{load_dataset, read_manifest, write_dataset, DatasetFormat};
use retroframe_core::evaluation::{CharacterClassifier, EvalReport};
use retroframe_core::gan::GanBaseline;
use retroframe_core::pipeline::{
    build_vocab, evaluate, generate_stories, new_story_model, tokenize_split, train_classifier, train_gan,
    train_story_model, train_tokenizer, train_tokenizer_on, ExperimentConfig, Validation,
};
use retroframe_core::sampling::SamplerConfig;
use retroframe_core::training::Mode;
use retroframe_core::{Dataset, Frame, GeneratedStory, ParamStore, Split, StorySample, VqVae};

pub const DATA_ROOT_ENV: &str = "RETROFRAME_DATA_ROOT";
const GAN_FILE: &str = "gan.safetensors";

#[derive(Debug, Parser)]
#[command(name = "retroframe", version, about = "Story continuation: train, generate, evaluate, serve")]
pub struct Cli {
    /// Default dataset directory for commands that read one.
    #[arg(long, env = DATA_ROOT_ENV, default_value = "data", global = true)]
    pub data_root: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct ConfigArgs {
    /// JSON experiment config (or a previous run.json).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted override, e.g. `--set train.epochs=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Seed for this command's randomness.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelKind {
    Retro,
    Gan,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TrainMode {
    Finetune,
    Prompt,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic story dataset.
    MakeSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train the image tokenizer.
    TrainVae {
        /// Dataset whose training frames are used; without it, random
        /// synthetic frames over the full palette.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train a story model.
    Train {
        #[arg(long, value_enum, default_value = "retro")]
        model: ModelKind,
        #[arg(long, value_enum, default_value = "finetune")]
        mode: TrainMode,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Tokenizer checkpoint; trained from scratch when absent.
        #[arg(long)]
        tokenizer: Option<PathBuf>,
        /// Bundle whose matching parameters initialize the model.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Character classifier for validation FID and the final report.
        #[arg(long)]
        classifier: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Generate the target frames of one dataset story.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        story: String,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        top_k: Option<usize>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Score a checkpoint on a dataset split and write eval-report.json.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        classifier: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Copy the metrics into the checkpoint's model card.
        #[arg(long)]
        update_card: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train and score the minus-one grid: full, without cross-attention,
    /// without story embeddings, without both.
    Ablate {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long)]
        classifier: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Serve a bundle over HTTP.
    Serve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        /// Dataset whose source frames requests may reference by id.
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

#[derive(Serialize)]
struct RunRecord<'a> {
    command: &'a str,
    argv: Vec<String>,
    build_id: String,
    config: &'a ExperimentConfig,
    seeds: BTreeMap<String, u64>,
    metrics: Value,
}

pub fn build_id() -> String {
    format!("{}+{}", env!("CARGO_PKG_VERSION"), option_env!("RETROFRAME_BUILD_ID").unwrap_or("local"))
}

fn seeds_of(cfg: &ExperimentConfig) -> BTreeMap<String, u64> {
    BTreeMap::from([
        ("synthetic".to_string(), cfg.synthetic.seed),
        ("tokenizer".to_string(), cfg.vq_train.seed),
        ("classifier".to_string(), cfg.classifier_train.seed),
        ("train".to_string(), cfg.train.seed),
        ("sampler".to_string(), cfg.sampler.seed),
        ("gan".to_string(), cfg.gan.train.seed),
    ])
}

fn write_run(dir: &Path, command: &str, cfg: &ExperimentConfig, metrics: Value) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir)?;
    let rec = RunRecord {
        command,
        argv: std::env::args().collect(),
        build_id: build_id(),
        config: cfg,
        seeds: seeds_of(cfg),
        metrics,
    };
    std::fs::write(dir.join("run.json"), serde_json::to_string_pretty(&rec)?)?;
    Ok(())
}

/// Base config from a file (plain config or the `config` field of a
/// run.json), then overrides.
pub fn resolve_config(args: &ConfigArgs) -> anyhow::Result<ExperimentConfig> {
    let base = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let mut v: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            if v.get("command").is_some() {
                if let Some(c) = v.get_mut("config") {
                    v = c.take();
                }
            }
            serde_json::from_value(v).with_context(|| format!("config {}", path.display()))?
        }
        None => ExperimentConfig::toy(),
    };
    Ok(base.with_overrides(&args.overrides)?)
}

fn load_data(path: &Path) -> anyhow::Result<Dataset> {
    let format = read_manifest(path)?.map(|m| m.format).unwrap_or(DatasetFormat::Generic);
    load_dataset(path, format).with_context(|| format!("loading dataset {}", path.display()))
}

fn is_synthetic(ds: &Dataset) -> bool {
    ds.name == "synthetic"
}

/// Classifier from a checkpoint, or trained here: on random full-palette
/// frames for synthetic data, on the labelled training frames otherwise.
fn obtain_classifier(
    path: Option<&Path>,
    cfg: &ExperimentConfig,
    ds: &Dataset,
    save_to: &Path,
) -> anyhow::Result<CharacterClassifier> {
    if let Some(p) = path {
        return Ok(load_classifier(p)?);
    }
    let held_out: Vec<&StorySample> = ds.split(Split::Val).collect();
    let clf = if is_synthetic(ds) {
        train_classifier(cfg, &held_out)?.0
    } else {
        if !ds.has_labels() {
            bail!("dataset has no character labels; pass --classifier");
        }
        let mut c = cfg.clone();
        c.classifier.n_labels = ds.n_labels();
        let mut clf = CharacterClassifier::new(
            c.classifier.clone(),
            std::sync::Arc::new(ParamStore::new(candle_core::DType::F32, c.classifier_train.seed)),
        )?;
        let data: Vec<_> = ds
            .split(Split::Train)
            .flat_map(|s| s.frames.iter().cloned().zip(s.char_labels.iter().cloned()))
            .collect();
        clf.train(&data, &c.classifier_train)?;
        clf
    };
    save_classifier(&save_to.join("classifier.safetensors"), &clf)?;
    Ok(clf)
}

/// Either kind of trained story model.
pub enum Generator {
    Retro(Bundle),
    Gan { gan: GanBaseline, vocab: retroframe_core::Vocab, card: Option<ModelCard> },
}

impl Generator {
    pub fn load(dir: &Path) -> anyhow::Result<Self> {
        if dir.join(GAN_FILE).exists() {
            let gan = load_gan(&dir.join(GAN_FILE))?;
            let mut vocab: retroframe_core::Vocab = serde_json::from_str(&std::fs::read_to_string(dir.join("vocab.json"))?)?;
            vocab.reindex();
            let card_path = dir.join("model-card.json");
            let card = if card_path.exists() { Some(serde_json::from_str(&std::fs::read_to_string(card_path)?)?) } else { None };
            return Ok(Generator::Gan { gan, vocab, card });
        }
        Ok(Generator::Retro(Bundle::load(dir).with_context(|| format!("loading bundle {}", dir.display()))?))
    }

    pub fn generate(&self, samples: &[&StorySample], sampler: &SamplerConfig) -> anyhow::Result<Vec<GeneratedStory>> {
        Ok(match self {
            Generator::Retro(b) => generate_stories(&b.model, &b.vq, &b.vocab, samples, sampler, 64)?,
            Generator::Gan { gan, vocab, .. } => {
                samples.iter().map(|s| gan.generate_story(s, vocab, sampler.seed)).collect::<Result<Vec<_>, _>>()?
            }
        })
    }
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let data_root = cli.data_root;
    let data_of = |d: Option<PathBuf>| d.unwrap_or_else(|| data_root.clone());
    match cli.command {
        Command::MakeSynthetic { out, mut cfg } => {
            if let Some(seed) = cfg.seed {
                cfg.overrides.push(format!("synthetic.seed={seed}"));
            }
            let cfg = resolve_config(&cfg)?;
            let ds = generate_synthetic_dataset(&cfg.synthetic)?;
            write_dataset(&out, &ds, DatasetFormat::Generic)?;
            let counts: BTreeMap<String, usize> =
                [Split::Train, Split::Val, Split::Test].iter().map(|&s| (s.to_string(), ds.count(s))).collect();
            write_run(&out, "make-synthetic", &cfg, json!({ "splits": counts }))?;
            println!("wrote {} stories to {}", ds.samples.len(), out.display());
        }
        Command::TrainVae { data, out, mut cfg } => {
            if let Some(seed) = cfg.seed {
                cfg.overrides.push(format!("vq_train.seed={seed}"));
            }
            let cfg = resolve_config(&cfg)?;
            let (vq, summary) = match data {
                Some(path) => {
                    let ds = load_data(&path)?;
                    let frames: Vec<Frame> = ds.split(Split::Train).flat_map(|s| s.frames.iter().cloned()).collect();
                    let heldout: Vec<Frame> = ds.split(Split::Val).flat_map(|s| s.frames.iter().cloned()).take(256).collect();
                    if frames.is_empty() || heldout.is_empty() {
                        bail!("dataset needs train and val frames");
                    }
                    train_tokenizer_on(&cfg, &frames, &heldout)?
                }
                None => train_tokenizer(&cfg)?,
            };
            std::fs::create_dir_all(&out)?;
            save_tokenizer(&out.join("tokenizer.safetensors"), &vq)?;
            write_run(&out, "train-vae", &cfg, serde_json::to_value(&summary)?)?;
            println!("tokenizer: held-out mse {:.5}, codebook usage {:.3}", summary.heldout_mse, summary.codebook_usage);
        }
        Command::Train { model, mode, data, tokenizer, init, classifier, out, mut cfg } => {
            let mode = match mode {
                TrainMode::Finetune => Mode::Finetune,
                TrainMode::Prompt => Mode::Prompt,
            };
            cfg.overrides.insert(0, format!("train.mode={}", serde_json::to_string(&mode)?));
            if let Some(seed) = cfg.seed {
                cfg.overrides.push(format!("train.seed={seed}"));
                cfg.overrides.push(format!("gan.train.seed={seed}"));
            }
            let cfg = resolve_config(&cfg)?;
            let ds = load_data(&data_of(data))?;
            std::fs::create_dir_all(&out)?;
            match model {
                ModelKind::Retro => train_retro(&cfg, &ds, tokenizer.as_deref(), init.as_deref(), classifier.as_deref(), &out)?,
                ModelKind::Gan => train_gan_cmd(&cfg, &ds, classifier.as_deref(), &out)?,
            }
        }
        Command::Generate { checkpoint, story, data, out, temperature, top_k, cfg: args } => {
            let mut cfg = resolve_config(&args)?;
            if let Some(s) = args.seed {
                cfg.sampler.seed = s;
            }
            if let Some(t) = temperature {
                cfg.sampler.temperature = t;
            }
            if let Some(k) = top_k {
                cfg.sampler.top_k = k;
            }
            let ds = load_data(&data_of(data))?;
            let Some(sample) = ds.get(&story) else {
                bail!("story {story:?} not found in the dataset");
            };
            let generator = Generator::load(&checkpoint)?;
            let generated = generator.generate(&[sample], &cfg.sampler)?.remove(0);
            std::fs::create_dir_all(&out)?;
            let mut files = Vec::new();
            for (t, f) in sample.target_indices().zip(&generated.frames) {
                let name = format!("frame_{}.png", t + 1);
                f.save_png(&out.join(&name))?;
                files.push(name);
            }
            write_run(&out, "generate", &cfg, json!({ "story": story, "frames": files }))?;
            println!("wrote {} frames to {}", files.len(), out.display());
        }
        Command::Evaluate { checkpoint, data, split, classifier, out, update_card, cfg: args } => {
            let mut cfg = resolve_config(&args)?;
            if let Some(s) = args.seed {
                cfg.sampler.seed = s;
            }
            let ds = load_data(&data_of(data))?;
            std::fs::create_dir_all(&out)?;
            let clf = obtain_classifier(classifier.as_deref(), &cfg, &ds, &out)?;
            let generator = Generator::load(&checkpoint)?;
            let samples: Vec<&StorySample> = ds.split(split).collect();
            if samples.is_empty() {
                bail!("split {split} is empty");
            }
            let generated = generator.generate(&samples, &cfg.sampler)?;
            let report = evaluate(
                &clf,
                &ds.name,
                &checkpoint.display().to_string(),
                &samples,
                &generated,
                ds.has_labels(),
                seeds_of(&cfg),
            )?;
            report.write(&out.join("eval-report.json"))?;
            if update_card {
                merge_card_metrics(&checkpoint, &report)?;
            }
            write_run(&out, "evaluate", &cfg, serde_json::to_value(&report)?)?;
            println!(
                "fid {:.3}  char_f1 {}  frame_acc {}  source corr {:.3}",
                report.fid,
                report.char_f1.map_or("-".into(), |v| format!("{v:.3}")),
                report.frame_acc.map_or("-".into(), |v| format!("{v:.3}")),
                report.correlation.mean
            );
        }
        Command::Ablate { data, tokenizer, classifier, out, mut cfg } => {
            if let Some(seed) = cfg.seed {
                cfg.overrides.push(format!("train.seed={seed}"));
            }
            let cfg = resolve_config(&cfg)?;
            let ds = load_data(&data_of(data))?;
            std::fs::create_dir_all(&out)?;
            let clf = obtain_classifier(classifier.as_deref(), &cfg, &ds, &out)?;
            let vq = load_tokenizer(&tokenizer)?;
            let rows = ablate(&cfg, &ds, &vq, &clf)?;
            std::fs::write(out.join("ablation.json"), serde_json::to_string_pretty(&rows)?)?;
            println!("{:<16} {:>8} {:>8} {:>8}", "variant", "fid", "char_f1", "corr");
            for r in &rows {
                println!(
                    "{:<16} {:>8.3} {:>8} {:>8.3}",
                    r.variant,
                    r.report.fid,
                    r.report.char_f1.map_or("-".into(), |v| format!("{v:.3}")),
                    r.report.correlation.mean
                );
            }
            write_run(&out, "ablate", &cfg, serde_json::to_value(&rows)?)?;
        }
        Command::Serve { checkpoint, port, data } => {
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(crate::server::serve(checkpoint, port, data))?;
        }
    }
    Ok(())
}

fn train_retro(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    tokenizer: Option<&Path>,
    init: Option<&Path>,
    classifier: Option<&Path>,
    out: &Path,
) -> anyhow::Result<()> {
    let vq = match tokenizer {
        Some(p) => load_tokenizer(p)?,
        None => train_tokenizer(cfg)?.0,
    };
    cfg.model.check_tokenizer(vq.config())?;
    let vocab = build_vocab(ds);
    if vocab.len() > cfg.model.v_text {
        bail!("vocabulary has {} words but model.v_text is {}", vocab.len(), cfg.model.v_text);
    }
    let train = tokenize_split(&vq, &vocab, ds, Split::Train, cfg.model.n_text)?;
    let val = tokenize_split(&vq, &vocab, ds, Split::Val, cfg.model.n_text)?;
    if train.is_empty() {
        bail!("dataset has no training stories");
    }
    let model = new_story_model(&cfg.model, cfg.train.seed)?;
    if let Some(dir) = init {
        let ck = read_checkpoint(&dir.join("model.safetensors"))?;
        ck.expect_kind(MODEL_KIND)?;
        let copied = ck.apply_matching(model.store())?;
        log::info!("initialized {} parameters from {}", copied.len(), dir.display());
    }
    let clf = classifier.map(load_classifier).transpose()?;
    let val_samples: Vec<&StorySample> = ds.split(Split::Val).take(cfg.train.val_stories).collect();
    let validation = clf.as_ref().map(|c| Validation { classifier: c, samples: val_samples, sampler: cfg.sampler });
    let summary = train_story_model(&model, &vq, &vocab, &train, &val, &cfg.train, validation.as_ref())?;
    let mut metrics = BTreeMap::new();
    if let Some(last) = summary.epochs.last() {
        metrics.insert("train_loss".to_string(), last.train_loss);
        if let Some(v) = last.val_loss {
            metrics.insert("val_loss".to_string(), v);
        }
    }
    if let Some(f) = summary.epochs.get(summary.selected_epoch - 1).and_then(|e| e.val_fid) {
        metrics.insert("val_fid".to_string(), f);
    }
    metrics.insert("trainable_fraction".to_string(), summary.census.fraction);
    let card = ModelCard {
        name: format!("story-transformer-{}", serde_json::to_value(cfg.train.mode)?.as_str().unwrap_or("run")),
        model: cfg.model.clone(),
        tokenizer: vq.config().clone(),
        dataset: ds.name.clone(),
        seeds: seeds_of(cfg),
        metrics,
        notes: "Research artifact trained on the data named above; intended for studying story continuation, \
                not for generating depictions of real people."
            .into(),
    };
    let bundle = Bundle { vq, model, vocab, card: Some(card) };
    bundle.save(out)?;
    write_run(out, "train", cfg, serde_json::to_value(&summary)?)?;
    println!(
        "epoch losses {:?}; selected epoch {}; trainable fraction {:.3}",
        summary.epoch_losses(),
        summary.selected_epoch,
        summary.census.fraction
    );
    Ok(())
}

fn train_gan_cmd(cfg: &ExperimentConfig, ds: &Dataset, classifier: Option<&Path>, out: &Path) -> anyhow::Result<()> {
    let vocab = build_vocab(ds);
    if vocab.len() > cfg.gan.config.v_text {
        bail!("vocabulary has {} words but gan.config.v_text is {}", vocab.len(), cfg.gan.config.v_text);
    }
    let store = std::sync::Arc::new(ParamStore::new(candle_core::DType::F32, cfg.gan.train.seed));
    let gan = GanBaseline::new(cfg.gan.config.clone(), store)?;
    let train: Vec<&StorySample> = ds.split(Split::Train).collect();
    let val: Vec<&StorySample> = ds.split(Split::Val).take(cfg.train.val_stories.max(16)).collect();
    let clf = classifier.map(load_classifier).transpose()?;
    let summary = train_gan(&gan, &vocab, &train, &val, &cfg.gan, clf.as_ref())?;
    save_gan(&out.join(GAN_FILE), &gan)?;
    std::fs::write(out.join("vocab.json"), serde_json::to_string_pretty(&vocab)?)?;
    if let Some(clf) = &clf {
        let generated = val.iter().map(|s| gan.generate_story(s, &vocab, cfg.sampler.seed)).collect::<Result<Vec<_>, _>>()?;
        let report = evaluate(clf, &ds.name, &out.display().to_string(), &val, &generated, ds.has_labels(), seeds_of(cfg))?;
        report.write(&out.join("eval-report.json"))?;
    }
    let last = summary.history.last().copied().unwrap_or_default();
    write_run(out, "train", cfg, serde_json::to_value(&summary)?)?;
    println!("gan: {} steps, final d {:.4} g {:.4}", summary.history.len(), last.d_total, last.g_total);
    Ok(())
}

fn merge_card_metrics(dir: &Path, report: &EvalReport) -> anyhow::Result<()> {
    let path = dir.join("model-card.json");
    if !path.exists() {
        bail!("{} has no model card", dir.display());
    }
    let mut card: ModelCard = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
    card.metrics.insert("fid".into(), report.fid);
    if let Some(v) = report.char_f1 {
        card.metrics.insert("char_f1".into(), v);
    }
    if let Some(v) = report.frame_acc {
        card.metrics.insert("frame_acc".into(), v);
    }
    card.metrics.insert("source_correlation".into(), report.correlation.mean);
    std::fs::write(path, serde_json::to_string_pretty(&card)?)?;
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub epoch_losses: Vec<f64>,
    pub report: EvalReport,
}

/// The minus-one grid over cross-attention and story embeddings.
pub fn ablate(cfg: &ExperimentConfig, ds: &Dataset, vq: &VqVae, clf: &CharacterClassifier) -> anyhow::Result<Vec<AblationRow>> {
    let vocab = build_vocab(ds);
    let train = tokenize_split(vq, &vocab, ds, Split::Train, cfg.model.n_text)?;
    let test: Vec<&StorySample> = ds.split(Split::Test).collect();
    let density = cfg.model.retro_density.or(Some(3));
    let variants = [
        ("full", density, true),
        ("-cross-attn", None, true),
        ("-story", density, false),
        ("-both", None, false),
    ];
    let mut rows = Vec::new();
    for (name, retro, story) in variants {
        let mut mc = cfg.model.clone();
        mc.retro_density = retro;
        mc.use_story = story;
        let model = new_story_model(&mc, cfg.train.seed)?;
        let summary = train_story_model(&model, vq, &vocab, &train, &[], &cfg.train, None)?;
        let generated = generate_stories(&model, vq, &vocab, &test, &cfg.sampler, 64)?;
        let report = evaluate(clf, &ds.name, name, &test, &generated, ds.has_labels(), seeds_of(cfg))?;
        log::info!("{name}: fid {:.3}", report.fid);
        rows.push(AblationRow { variant: name.into(), epoch_losses: summary.epoch_losses(), report });
    }
    Ok(rows)
}

/// Loads only the model of a bundle, checking it against `expected`.
pub fn load_bundle_model(dir: &Path, expected: &ExperimentConfig) -> anyhow::Result<retroframe_core::StoryTransformer> {
    Ok(load_model(&dir.join("model.safetensors"), Some(&expected.model))?)
}
