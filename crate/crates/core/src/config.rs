use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Image tokenizer hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerConfig {
    pub image_size: usize,
    /// Side length `g` of the token grid.
    pub grid: usize,
    pub d_code: usize,
    pub codebook_size: usize,
    pub hidden: usize,
    /// Commitment weight.
    pub beta: f64,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            grid: 16,
            d_code: 64,
            codebook_size: 512,
            hidden: 256,
            beta: 0.25,
        }
    }
}

impl TokenizerConfig {
    pub fn patch(&self) -> usize {
        self.image_size / self.grid
    }

    pub fn n_tokens(&self) -> usize {
        self.grid * self.grid
    }

    pub fn patch_dim(&self) -> usize {
        self.patch() * self.patch() * 3
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid == 0 || self.image_size % self.grid != 0 {
            return Err(Error::Config(format!(
                "image_size {} is not divisible by grid {}",
                self.image_size, self.grid
            )));
        }
        if self.codebook_size < 2 {
            return Err(Error::Config("codebook_size must be >= 2".into()));
        }
        if self.d_code == 0 || self.hidden == 0 {
            return Err(Error::Config("d_code and hidden must be positive".into()));
        }
        Ok(())
    }
}

/// Architecture of the story transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub v_text: usize,
    pub v_img: usize,
    pub n_text: usize,
    pub n_img: usize,
    /// Cross-attention in every k-th block (1-based block numbering);
    /// `None` removes all retro layers.
    pub retro_density: Option<usize>,
    /// Number of prompt rows; 0 disables the prompt.
    pub prompt_len: usize,
    /// Whether the global story vector is prepended.
    pub use_story: bool,
    pub t_max: usize,
    /// Width of caption sentence embeddings fed to the story encoder.
    pub d_sent: usize,
    pub ffn_mult: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 256,
            n_heads: 8,
            n_blocks: 6,
            v_text: 64,
            v_img: 512,
            n_text: 64,
            n_img: 256,
            retro_density: Some(3),
            prompt_len: 16,
            use_story: true,
            t_max: 8,
            d_sent: 256,
            ffn_mult: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if let Some(k) = self.retro_density {
            if k == 0 || k > self.n_blocks {
                return Err(Error::Config(format!(
                    "retro density {k} outside [1, {}]",
                    self.n_blocks
                )));
            }
        }
        if self.n_text == 0 || self.n_img == 0 {
            return Err(Error::Config("n_text and n_img must be positive".into()));
        }
        if self.v_text < 2 || self.v_img < 2 {
            return Err(Error::Config("vocabularies need at least 2 entries".into()));
        }
        if self.t_max < 2 {
            return Err(Error::Config("t_max must be at least 2".into()));
        }
        Ok(())
    }

    /// Whether 0-based block `index` carries a cross-attention layer.
    pub fn is_retro_block(&self, index: usize) -> bool {
        match self.retro_density {
            Some(k) => (index + 1) % k == 0,
            None => false,
        }
    }

    pub fn n_retro_blocks(&self) -> usize {
        (0..self.n_blocks).filter(|&i| self.is_retro_block(i)).count()
    }

    pub fn story_len(&self) -> usize {
        usize::from(self.use_story)
    }

    /// Full sequence length: prompt + story + caption + image.
    pub fn seq_len(&self) -> usize {
        self.prompt_len + self.story_len() + self.n_text + self.n_img
    }

    /// Checks the tokenizer produces grids this model can consume.
    pub fn check_tokenizer(&self, tok: &TokenizerConfig) -> Result<()> {
        if tok.n_tokens() != self.n_img || tok.codebook_size != self.v_img {
            return Err(Error::Config(format!(
                "tokenizer grid {}x{} / codebook {} does not match model n_img {} / v_img {}",
                tok.grid, tok.grid, tok.codebook_size, self.n_img, self.v_img
            )));
        }
        Ok(())
    }
}
