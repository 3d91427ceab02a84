//! Training regimes, learning-rate schedules, and the optimizer loop.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use candle_core::backprop::GradStore;
use candle_core::{DType, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::batch::{build_input, examples};
use crate::data::TokenizedStory;
use crate::error::{invalid, Error, Result};
use crate::params::ParamGroup;
use crate::transformer::{ModelInput, StoryTransformer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Finetune,
    Prompt,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "finetune" => Ok(Mode::Finetune),
            "prompt" => Ok(Mode::Prompt),
            other => invalid(format!("unknown training mode {other:?} (expected finetune or prompt)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    /// Linear warmup, then cosine decay to 0.1 of the peak.
    Cosine,
    /// Linear warmup, then linear decay to 0.1 of the peak.
    Linear,
}

/// Learning rate at `step`: linear warmup from 0 to `max_lr` over `warmup`
/// steps, then decay to `0.1 * max_lr` at `total` (held there afterwards).
pub fn lr_schedule(schedule: Schedule, step: usize, max_lr: f64, warmup: usize, total: usize) -> Result<f64> {
    if total < warmup {
        return invalid(format!("total steps {total} < warmup steps {warmup}"));
    }
    let floor = 0.1 * max_lr;
    if step < warmup {
        return Ok(max_lr * step as f64 / warmup as f64);
    }
    if total == warmup {
        // No decay phase: the peak is reached exactly at the end.
        return Ok(if step == total { max_lr } else { floor });
    }
    let p = ((step - warmup) as f64 / (total - warmup) as f64).min(1.0);
    Ok(match schedule {
        Schedule::Cosine => floor + (max_lr - floor) * 0.5 * (1.0 + (PI * p).cos()),
        Schedule::Linear => max_lr - (max_lr - floor) * p,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRegime {
    pub mode: Mode,
    /// Peak LR of modules added on top of the backbone (retro, story, prompt).
    pub lr_new: f64,
    /// Peak LR of backbone and embedding parameters.
    pub lr_pretrained: f64,
    pub schedule: Schedule,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Global gradient-norm clip; `<= 0` disables clipping.
    pub clip_norm: f64,
}

impl TrainRegime {
    pub fn finetune(total_steps: usize) -> Self {
        Self {
            mode: Mode::Finetune,
            lr_new: 1e-4,
            lr_pretrained: 1e-5,
            schedule: Schedule::Cosine,
            warmup_steps: 750.min(total_steps),
            total_steps,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.95,
            clip_norm: 1.0,
        }
    }

    pub fn prompt(total_steps: usize) -> Self {
        Self {
            mode: Mode::Prompt,
            lr_new: 5e-4,
            lr_pretrained: 5e-4,
            schedule: Schedule::Linear,
            ..Self::finetune(total_steps)
        }
    }

    pub fn for_mode(mode: Mode, total_steps: usize) -> Self {
        match mode {
            Mode::Finetune => Self::finetune(total_steps),
            Mode::Prompt => Self::prompt(total_steps),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_steps < self.warmup_steps {
            return invalid(format!(
                "total_steps {} < warmup_steps {}",
                self.total_steps, self.warmup_steps
            ));
        }
        for (name, v) in [("lr_new", self.lr_new), ("lr_pretrained", self.lr_pretrained)] {
            if !(v.is_finite() && v >= 0.0) {
                return invalid(format!("{name} must be a finite non-negative number, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return invalid("betas must lie in [0, 1)");
        }
        Ok(())
    }

    /// Whether parameter `name` is updated under this regime. Prompt mode
    /// freezes the backbone but keeps token embeddings trainable.
    pub fn is_trainable(&self, name: &str) -> bool {
        match ParamGroup::of(name) {
            ParamGroup::Retro | ParamGroup::Story | ParamGroup::Prompt | ParamGroup::Embeddings => true,
            ParamGroup::Backbone => self.mode == Mode::Finetune,
            _ => false,
        }
    }

    /// Whether `name` belongs to the new-module LR group.
    pub fn is_new(name: &str) -> bool {
        matches!(ParamGroup::of(name), ParamGroup::Retro | ParamGroup::Story | ParamGroup::Prompt)
    }

    pub fn lr_at(&self, step: usize) -> Result<(f64, f64)> {
        let f = |max| lr_schedule(self.schedule, step, max, self.warmup_steps, self.total_steps);
        Ok((f(self.lr_new)?, f(self.lr_pretrained)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub total: f64,
    pub text_loss: f64,
    pub image_loss: f64,
    /// Global norm of the trainable gradients before clipping.
    pub grad_norm: f64,
    pub lr_new: f64,
    pub lr_pretrained: f64,
}

/// Trainable-parameter report of a regime applied to a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainableCensus {
    pub trainable: usize,
    pub frozen: usize,
    pub fraction: f64,
    pub trainable_names: Vec<String>,
}

/// L2 norm over every gradient in `vars`.
pub fn grad_norm(grads: &GradStore, vars: &[Var]) -> Result<f64> {
    let mut sq = 0.0;
    for v in vars {
        if let Some(g) = grads.get(v) {
            sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        }
    }
    Ok(sq.sqrt())
}

/// Owns optimizer state for one model and regime.
pub struct Trainer<'m> {
    model: &'m StoryTransformer,
    regime: TrainRegime,
    new_vars: Vec<Var>,
    old_vars: Vec<Var>,
    opt_new: AdamW,
    opt_old: AdamW,
    step: usize,
    census: TrainableCensus,
    pub history: Vec<StepMetrics>,
}

impl<'m> Trainer<'m> {
    pub fn new(model: &'m StoryTransformer, regime: TrainRegime) -> Result<Self> {
        regime.validate()?;
        let store = model.store();
        let mut new_vars = Vec::new();
        let mut old_vars = Vec::new();
        let mut names = Vec::new();
        let mut frozen = 0;
        for (name, var) in store.vars() {
            if !regime.is_trainable(&name) {
                frozen += var.elem_count();
                continue;
            }
            names.push(name.clone());
            if TrainRegime::is_new(&name) {
                new_vars.push(var);
            } else {
                old_vars.push(var);
            }
        }
        let trainable: usize = new_vars.iter().chain(&old_vars).map(|v| v.elem_count()).sum();
        let params = |lr| ParamsAdamW {
            lr,
            beta1: regime.beta1,
            beta2: regime.beta2,
            eps: 1e-8,
            weight_decay: regime.weight_decay,
        };
        let (lr_new, lr_old) = regime.lr_at(0)?;
        Ok(Self {
            model,
            opt_new: AdamW::new(new_vars.clone(), params(lr_new))?,
            opt_old: AdamW::new(old_vars.clone(), params(lr_old))?,
            new_vars,
            old_vars,
            regime,
            step: 0,
            census: TrainableCensus {
                trainable,
                frozen,
                fraction: trainable as f64 / (trainable + frozen).max(1) as f64,
                trainable_names: names,
            },
            history: Vec::new(),
        })
    }

    pub fn regime(&self) -> &TrainRegime {
        &self.regime
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn census(&self) -> &TrainableCensus {
        &self.census
    }

    /// One optimizer step on `input` (which must carry the target image).
    /// A non-finite loss or gradient aborts the step before any update.
    pub fn train_step(&mut self, input: &ModelInput) -> Result<StepMetrics> {
        let Some(image) = &input.image else {
            return invalid("training input has no target image");
        };
        let (logits, layout) = self.model.forward_logits(input)?;
        let loss = self.model.lm_loss(&logits, &layout, &input.caption, image)?;
        let scalar = |t: &candle_core::Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        let total = scalar(&loss.total)?;
        if !total.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {} is {total}; step aborted", self.step)));
        }
        let mut grads = loss.total.backward()?;
        let all: Vec<Var> = self.new_vars.iter().chain(&self.old_vars).cloned().collect();
        let norm = grad_norm(&grads, &all)?;
        if !norm.is_finite() {
            return Err(Error::NonFinite(format!("gradient norm at step {} is {norm}; step aborted", self.step)));
        }
        if self.regime.clip_norm > 0.0 && norm > self.regime.clip_norm {
            let scale = self.regime.clip_norm / norm;
            for v in &all {
                if let Some(g) = grads.remove(v) {
                    grads.insert(v, (g * scale)?);
                }
            }
        }
        let (lr_new, lr_old) = self.regime.lr_at(self.step)?;
        self.opt_new.set_learning_rate(lr_new);
        self.opt_old.set_learning_rate(lr_old);
        self.opt_new.step(&grads)?;
        self.opt_old.step(&grads)?;
        let m = StepMetrics {
            step: self.step,
            total,
            text_loss: scalar(&loss.text)?,
            image_loss: scalar(&loss.image)?,
            grad_norm: norm,
            lr_new,
            lr_pretrained: lr_old,
        };
        self.step += 1;
        self.history.push(m);
        Ok(m)
    }

    /// One pass over every (story, target timestep) pair in shuffled order.
    /// Returns the mean step loss.
    pub fn train_epoch(&mut self, stories: &[TokenizedStory], batch_size: usize, seed: u64) -> Result<f64> {
        let mut items = examples(stories);
        if items.is_empty() {
            return invalid("no training examples");
        }
        items.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut sum = 0.0;
        let mut n = 0;
        for chunk in items.chunks(batch_size.max(1)) {
            let input = build_input(chunk, true, self.model.store().device())?;
            sum += self.train_step(&input)?.total;
            n += 1;
        }
        Ok(sum / n as f64)
    }
}

/// Number of optimizer steps in `epochs` passes with the given batch size.
pub fn steps_per_epoch(stories: &[TokenizedStory], batch_size: usize) -> usize {
    examples(stories).len().div_ceil(batch_size.max(1))
}

/// Mean loss over all target examples without updating anything.
pub fn evaluate_loss(model: &StoryTransformer, stories: &[TokenizedStory], batch_size: usize) -> Result<f64> {
    let items = examples(stories);
    let mut sum = 0.0;
    let mut weight = 0;
    for chunk in items.chunks(batch_size.max(1)) {
        let input = build_input(chunk, true, model.store().device())?;
        let (logits, layout) = model.forward_logits(&input)?;
        let loss = model.lm_loss(&logits, &layout, &input.caption, input.image.as_ref().unwrap())?;
        sum += loss.total.to_dtype(DType::F64)?.to_scalar::<f64>()? * chunk.len() as f64;
        weight += chunk.len();
    }
    Ok(sum / weight.max(1) as f64)
}

/// Map from parameter name to a copy of its current values.
pub fn frozen_snapshot(model: &StoryTransformer, regime: &TrainRegime) -> Result<BTreeMap<String, Vec<f32>>> {
    model
        .store()
        .vars()
        .into_iter()
        .filter(|(n, _)| !regime.is_trainable(n))
        .map(|(n, v)| Ok((n, v.as_tensor().to_dtype(DType::F32)?.flatten_all()?.to_vec1()?)))
        .collect()
}
