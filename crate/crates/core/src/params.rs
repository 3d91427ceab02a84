//! Named, deterministically initialized parameter storage.
//!
//! Every parameter is a [`Var`] addressed by a dotted name. The initial value
//! of a parameter depends only on the store seed and its name, so two models
//! that share a backbone but differ in optional layers (for example a retro
//! model and its no-cross-attention ablation) start from identical backbone
//! weights regardless of construction order.

use std::collections::BTreeMap;
use std::sync::Mutex;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    Uniform(f64),
    /// Square identity; only valid for 2-D square shapes.
    Eye,
}

/// Coarse ownership of a parameter, derived from the first path segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Token embedding and positional tables.
    Embeddings,
    /// Self-attention blocks, the pretrained-analogue trunk.
    Backbone,
    /// Cross-attention layers and the source positional table.
    Retro,
    /// Sentence encoder and global story encoder.
    Story,
    /// Prompt matrix and its parameterization network.
    Prompt,
    Tokenizer,
    Classifier,
    Generator,
    ImageDisc,
    StoryDisc,
    Other,
}

impl ParamGroup {
    pub fn of(name: &str) -> Self {
        match name.split('.').next().unwrap_or("") {
            "embed" => Self::Embeddings,
            "backbone" => Self::Backbone,
            "retro" => Self::Retro,
            "story" => Self::Story,
            "prompt" => Self::Prompt,
            "vq" => Self::Tokenizer,
            "clf" => Self::Classifier,
            "gen" => Self::Generator,
            "disc_img" => Self::ImageDisc,
            "disc_story" => Self::StoryDisc,
            _ => Self::Other,
        }
    }
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Draws a normal tensor from a caller-owned RNG.
pub fn normal_tensor(rng: &mut impl rand::Rng, dims: &[usize], std: f64, dtype: DType) -> Result<Tensor> {
    let d = Normal::new(0.0, std).map_err(|e| Error::Invalid(e.to_string()))?;
    let n: usize = dims.iter().product();
    let v: Vec<f64> = (0..n).map(|_| d.sample(rng)).collect();
    Ok(Tensor::from_vec(v, dims, &Device::Cpu)?.to_dtype(dtype)?)
}

pub struct ParamStore {
    vars: Mutex<BTreeMap<String, Var>>,
    dtype: DType,
    device: Device,
    seed: u64,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("dtype", &self.dtype)
            .field("seed", &self.seed)
            .field("len", &self.len())
            .finish()
    }
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            vars: Mutex::new(BTreeMap::new()),
            dtype,
            device: Device::Cpu,
            seed,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.vars.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Fetches `name`, creating it with `init` if absent.
    pub fn get(&self, name: &str, dims: &[usize], init: Init) -> Result<Tensor> {
        let mut vars = self.vars.lock().unwrap();
        if let Some(v) = vars.get(name) {
            if v.dims() != dims {
                return Err(Error::Shape(format!(
                    "parameter {name} exists with shape {:?}, requested {dims:?}",
                    v.dims()
                )));
            }
            return Ok(v.as_tensor().clone());
        }
        let values = self.init_values(name, dims, init)?;
        let t = Tensor::from_vec(values, dims, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        vars.insert(name.to_string(), var);
        Ok(out)
    }

    fn init_values(&self, name: &str, dims: &[usize], init: Init) -> Result<Vec<f64>> {
        let n: usize = dims.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ name_hash(name));
        Ok(match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => {
                let d = Normal::new(0.0, std).map_err(|e| Error::Invalid(e.to_string()))?;
                (0..n).map(|_| d.sample(&mut rng)).collect()
            }
            Init::Uniform(bound) => {
                let d = Uniform::new_inclusive(-bound, bound)
                    .map_err(|e| Error::Invalid(e.to_string()))?;
                (0..n).map(|_| d.sample(&mut rng)).collect()
            }
            Init::Eye => {
                if dims.len() != 2 || dims[0] != dims[1] {
                    return Err(Error::Shape(format!("Eye init needs a square matrix, got {dims:?}")));
                }
                let mut v = vec![0.0; n];
                for i in 0..dims[0] {
                    v[i * dims[0] + i] = 1.0;
                }
                v
            }
        })
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.vars.lock().unwrap().get(name).cloned()
    }

    pub fn names(&self) -> Vec<String> {
        self.vars.lock().unwrap().keys().cloned().collect()
    }

    pub fn vars(&self) -> Vec<(String, Var)> {
        self.vars
            .lock()
            .unwrap()
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn vars_where(&self, pred: impl Fn(&str) -> bool) -> Vec<(String, Var)> {
        self.vars().into_iter().filter(|(n, _)| pred(n)).collect()
    }

    /// Overwrites the value of an existing parameter.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .var(name)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter {name}")))?;
        if var.dims() != value.dims() {
            return Err(Error::Shape(format!(
                "parameter {name} has shape {:?}, value has {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    /// Inserts or replaces a parameter with the given value.
    pub fn insert(&self, name: &str, value: &Tensor) -> Result<()> {
        if self.var(name).is_some() {
            return self.set(name, value);
        }
        let var = Var::from_tensor(&value.to_dtype(self.dtype)?)?;
        self.vars.lock().unwrap().insert(name.to_string(), var);
        Ok(())
    }

    pub fn num_elements(&self, pred: impl Fn(&str) -> bool) -> usize {
        self.vars
            .lock()
            .unwrap()
            .iter()
            .filter(|(n, _)| pred(n))
            .map(|(_, v)| v.elem_count())
            .sum()
    }

    /// Deep copy of every parameter value.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars()
            .into_iter()
            .map(|(n, v)| Ok((n, v.as_tensor().copy()?)))
            .collect()
    }

    /// Parameter counts per group.
    pub fn census(&self) -> BTreeMap<ParamGroup, usize> {
        let mut out = BTreeMap::new();
        for (name, var) in self.vars() {
            *out.entry(ParamGroup::of(&name)).or_insert(0) += var.elem_count();
        }
        out
    }

    /// Reads one scalar element (row-major flat index) as f64.
    pub fn element(&self, name: &str, index: usize) -> Result<f64> {
        let var = self
            .var(name)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter {name}")))?;
        let flat = var.as_tensor().flatten_all()?.to_dtype(DType::F64)?;
        Ok(flat.get(index)?.to_scalar::<f64>()?)
    }

    /// Writes one scalar element (row-major flat index).
    pub fn set_element(&self, name: &str, index: usize, value: f64) -> Result<()> {
        let var = self
            .var(name)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter {name}")))?;
        let mut flat: Vec<f64> = var
            .as_tensor()
            .flatten_all()?
            .to_dtype(DType::F64)?
            .to_vec1()?;
        flat[index] = value;
        let t = Tensor::from_vec(flat, var.dims(), &self.device)?.to_dtype(self.dtype)?;
        var.set(&t)?;
        Ok(())
    }
}
