use crate::error::{Error, Result};

/// Shape of the decoder shared by the actor, critic and reference models.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub codebook_size: usize,
    pub prompts: usize,
    pub reward_tokens: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub d_ff: usize,
    /// Longest sequence, End included.
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            codebook_size: 32,
            prompts: 8,
            reward_tokens: 3,
            d_model: 64,
            heads: 4,
            layers: 2,
            d_ff: 256,
            max_len: 24,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| Err(Error::config(key, msg));
        if self.codebook_size == 0 {
            return bad("codebook_size", "must be positive");
        }
        if self.prompts == 0 {
            return bad("prompts", "must be positive");
        }
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return bad("heads", "must divide d_model");
        }
        if self.layers == 0 || self.d_ff == 0 {
            return bad("layers", "layers and d_ff must be positive");
        }
        if self.max_len < 2 {
            return bad("max_len", "must be at least 2");
        }
        Ok(())
    }
}
