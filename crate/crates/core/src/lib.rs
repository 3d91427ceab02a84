//! Story continuation: a VQ image tokenizer, an autoregressive transformer
//! retro-fitted with source-frame cross-attention and a global story encoder,
//! prompt-tuning and finetuning regimes, a GAN baseline, and evaluation.

pub mod batch;
pub mod checkpoint;
pub mod conditioning;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod frame;
pub mod gan;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod sampling;
pub mod tokenizer;
pub mod training;
pub mod transformer;

pub use config::{ModelConfig, TokenizerConfig};
pub use data::{Dataset, GeneratedStory, Split, StorySample, Vocab};
pub use error::{Error, Result};
pub use frame::Frame;
pub use params::{ParamGroup, ParamStore};
pub use tokenizer::{Codebook, ImageTokenGrid, VqVae};
pub use transformer::{ModelInput, StoryTransformer};
