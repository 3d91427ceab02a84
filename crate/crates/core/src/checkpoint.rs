//! Safetensors checkpoints with embedded metadata, and model bundles.
//!
//! Every checkpoint stores its format version, a kind tag, the JSON config
//! of the model it belongs to, the parameter-store seed, and a SHA-256 over
//! all tensor bytes. Loading verifies all of them before any parameter is
//! touched.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ModelConfig, TokenizerConfig};
use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::evaluation::{CharacterClassifier, ClassifierConfig, CLASSIFIER_KIND};
use crate::gan::{GanConfig, GanBaseline};
use crate::params::ParamStore;
use crate::tokenizer::VqVae;
use crate::transformer::StoryTransformer;

pub const FORMAT_VERSION: u32 = 1;

/// Decoded checkpoint contents.
#[derive(Debug)]
pub struct Checkpoint {
    pub kind: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub tensors: BTreeMap<String, Tensor>,
}

fn digest(tensors: &BTreeMap<String, Tensor>) -> Result<String> {
    let mut h = Sha256::new();
    for (name, t) in tensors {
        h.update(name.as_bytes());
        h.update(format!("{:?}{:?}", t.dtype(), t.dims()).as_bytes());
        let bytes: Vec<u8> = match t.dtype() {
            candle_core::DType::F64 => t.flatten_all()?.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
            _ => t
                .flatten_all()?
                .to_dtype(candle_core::DType::F32)?
                .to_vec1::<f32>()?
                .iter()
                .flat_map(|v| v.to_le_bytes())
                .collect(),
        };
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

/// Writes every parameter of `store` to `path` (via a temporary file, so a
/// crash never leaves a truncated checkpoint behind).
pub fn save_store(path: &Path, store: &ParamStore, kind: &str, config: &impl Serialize) -> Result<()> {
    let tensors = store.snapshot()?;
    let mut meta = HashMap::new();
    meta.insert("format_version".to_string(), FORMAT_VERSION.to_string());
    meta.insert("kind".to_string(), kind.to_string());
    meta.insert("config".to_string(), serde_json::to_string(config)?);
    meta.insert("seed".to_string(), store.seed().to_string());
    meta.insert("sha256".to_string(), digest(&tensors)?);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("tmp");
    safetensors::serialize_to_file(tensors.iter().map(|(k, v)| (k.as_str(), v)), Some(meta), &tmp)
        .map_err(|e| Error::Checkpoint(format!("writing {}: {e}", path.display())))?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Reads and verifies a checkpoint without applying it anywhere.
pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    let ctx = |e: &dyn std::fmt::Display| Error::Checkpoint(format!("{}: {e}", path.display()));
    let (_, header) = safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| ctx(&e))?;
    let meta = header.metadata().clone().ok_or_else(|| ctx(&"missing metadata"))?;
    let get = |k: &str| meta.get(k).ok_or_else(|| ctx(&format!("missing metadata field {k}")));
    let found: u32 = get("format_version")?.parse().map_err(|e| ctx(&e))?;
    if found != FORMAT_VERSION {
        return Err(Error::Version { found, expected: FORMAT_VERSION });
    }
    let st = safetensors::SafeTensors::deserialize(&bytes).map_err(|e| ctx(&e))?;
    let mut tensors = BTreeMap::new();
    for (name, view) in st.tensors() {
        let t = candle_core::safetensors::Load::load(&view, &Device::Cpu).map_err(|e| ctx(&e))?;
        tensors.insert(name, t);
    }
    let want = get("sha256")?;
    if &digest(&tensors)? != want {
        return Err(ctx(&"tensor data does not match its recorded checksum (file corrupted?)"));
    }
    Ok(Checkpoint {
        kind: get("kind")?.clone(),
        config: serde_json::from_str(get("config")?).map_err(|e| ctx(&e))?,
        seed: get("seed")?.parse().map_err(|e| ctx(&e))?,
        tensors,
    })
}

impl Checkpoint {
    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!("expected a {kind} checkpoint, found {}", self.kind)));
        }
        Ok(())
    }

    pub fn config_as<T: DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(self.config.clone()).map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))
    }

    /// Copies every tensor into `store`. Names and shapes are checked in full
    /// first; on any mismatch nothing is written.
    pub fn apply(&self, store: &ParamStore) -> Result<()> {
        let have: BTreeMap<String, Vec<usize>> = store
            .vars()
            .into_iter()
            .map(|(n, v)| (n, v.dims().to_vec()))
            .collect();
        let mut problems = Vec::new();
        for (name, dims) in &have {
            match self.tensors.get(name) {
                None => problems.push(format!("missing parameter {name}")),
                Some(t) if t.dims() != dims.as_slice() => {
                    problems.push(format!("{name}: checkpoint shape {:?}, model shape {dims:?}", t.dims()))
                }
                _ => {}
            }
        }
        for name in self.tensors.keys() {
            if !have.contains_key(name) {
                problems.push(format!("unexpected parameter {name}"));
            }
        }
        if !problems.is_empty() {
            return Err(Error::Checkpoint(problems.join("; ")));
        }
        for (name, t) in &self.tensors {
            store.set(name, t)?;
        }
        Ok(())
    }

    /// Copies the tensors whose name and shape match a parameter of `store`,
    /// leaving everything else untouched. Used to start prompt tuning from a
    /// finetuned backbone. Returns the names copied.
    pub fn apply_matching(&self, store: &ParamStore) -> Result<Vec<String>> {
        let mut copied = Vec::new();
        for (name, var) in store.vars() {
            if let Some(t) = self.tensors.get(&name) {
                if t.dims() == var.dims() {
                    store.set(&name, t)?;
                    copied.push(name);
                }
            }
        }
        Ok(copied)
    }
}

pub const MODEL_KIND: &str = "story-transformer";
pub const GAN_KIND: &str = "story-gan";
pub const TOKENIZER_KIND: &str = "vq-tokenizer";

pub fn save_model(path: &Path, model: &StoryTransformer) -> Result<()> {
    save_store(path, model.store(), MODEL_KIND, model.config())
}

/// Loads a model. With `expected`, a checkpoint whose embedded config differs
/// is rejected.
pub fn load_model(path: &Path, expected: Option<&ModelConfig>) -> Result<StoryTransformer> {
    let ck = read_checkpoint(path)?;
    ck.expect_kind(MODEL_KIND)?;
    let cfg: ModelConfig = ck.config_as()?;
    if let Some(want) = expected {
        if *want != cfg {
            return Err(Error::Config(format!(
                "checkpoint config conflicts with the requested config:\n  checkpoint: {}\n  requested:  {}",
                serde_json::to_string(&cfg)?,
                serde_json::to_string(want)?
            )));
        }
    }
    let dtype = ck.tensors.values().next().map(|t| t.dtype()).unwrap_or(candle_core::DType::F32);
    let store = std::sync::Arc::new(ParamStore::new(dtype, ck.seed));
    let model = StoryTransformer::new(cfg, store.clone())?;
    ck.apply(&store)?;
    Ok(model)
}

pub fn save_tokenizer(path: &Path, vq: &VqVae) -> Result<()> {
    save_store(path, vq.store(), TOKENIZER_KIND, vq.config())
}

pub fn load_tokenizer(path: &Path) -> Result<VqVae> {
    let ck = read_checkpoint(path)?;
    ck.expect_kind(TOKENIZER_KIND)?;
    let cfg: TokenizerConfig = ck.config_as()?;
    let dtype = ck.tensors.values().next().map(|t| t.dtype()).unwrap_or(candle_core::DType::F32);
    let store = std::sync::Arc::new(ParamStore::new(dtype, ck.seed));
    let vq = VqVae::new(cfg, store.clone())?;
    ck.apply(&store)?;
    Ok(vq)
}

pub fn save_classifier(path: &Path, clf: &CharacterClassifier) -> Result<()> {
    save_store(path, clf.store(), CLASSIFIER_KIND, clf.config())
}

pub fn load_classifier(path: &Path) -> Result<CharacterClassifier> {
    let ck = read_checkpoint(path)?;
    ck.expect_kind(CLASSIFIER_KIND)?;
    let cfg: ClassifierConfig = ck.config_as()?;
    let dtype = ck.tensors.values().next().map(|t| t.dtype()).unwrap_or(candle_core::DType::F32);
    let store = std::sync::Arc::new(ParamStore::new(dtype, ck.seed));
    let clf = CharacterClassifier::new(cfg, store.clone())?;
    ck.apply(&store)?;
    Ok(clf)
}

pub fn save_gan(path: &Path, gan: &GanBaseline) -> Result<()> {
    save_store(path, gan.store(), GAN_KIND, gan.config())
}

pub fn load_gan(path: &Path) -> Result<GanBaseline> {
    let ck = read_checkpoint(path)?;
    ck.expect_kind(GAN_KIND)?;
    let cfg: GanConfig = ck.config_as()?;
    let dtype = ck.tensors.values().next().map(|t| t.dtype()).unwrap_or(candle_core::DType::F32);
    let store = std::sync::Arc::new(ParamStore::new(dtype, ck.seed));
    let gan = GanBaseline::new(cfg, store.clone())?;
    ck.apply(&store)?;
    Ok(gan)
}

/// Metadata stored beside every model checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCard {
    pub name: String,
    pub model: ModelConfig,
    pub tokenizer: TokenizerConfig,
    pub dataset: String,
    pub seeds: BTreeMap<String, u64>,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
    #[serde(default)]
    pub notes: String,
}

/// A directory holding everything needed for generation:
/// `tokenizer.safetensors`, `model.safetensors`, `vocab.json`, and
/// `model-card.json`.
pub struct Bundle {
    pub vq: VqVae,
    pub model: StoryTransformer,
    pub vocab: Vocab,
    pub card: Option<ModelCard>,
}

impl Bundle {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        save_tokenizer(&dir.join("tokenizer.safetensors"), &self.vq)?;
        save_model(&dir.join("model.safetensors"), &self.model)?;
        std::fs::write(dir.join("vocab.json"), serde_json::to_string_pretty(&self.vocab)?)?;
        if let Some(card) = &self.card {
            std::fs::write(dir.join("model-card.json"), serde_json::to_string_pretty(card)?)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let vq = load_tokenizer(&dir.join("tokenizer.safetensors"))?;
        let model = load_model(&dir.join("model.safetensors"), None)?;
        model.config().check_tokenizer(vq.config())?;
        let mut vocab: Vocab = serde_json::from_str(&std::fs::read_to_string(dir.join("vocab.json"))?)?;
        vocab.reindex();
        if vocab.len() > model.config().v_text {
            return Err(Error::Config(format!(
                "vocabulary has {} words but the model accepts {}",
                vocab.len(),
                model.config().v_text
            )));
        }
        let card_path = dir.join("model-card.json");
        let card = if card_path.exists() {
            Some(serde_json::from_str(&std::fs::read_to_string(card_path)?)?)
        } else {
            None
        };
        Ok(Self { vq, model, vocab, card })
    }
}
