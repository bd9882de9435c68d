use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::VOCAB_SIZE;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub d_model: usize,
    pub ffn_dim: usize,
    pub heads: usize,
    pub vocab: usize,
    pub max_seq: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    /// 2/2 layers, d=64, 4 heads.
    pub fn toy() -> Self {
        Self { enc_layers: 2, dec_layers: 2, d_model: 64, ffn_dim: 128, heads: 4, vocab: VOCAB_SIZE, max_seq: 512, seed: 0 }
    }

    /// The full-size layout: 8/8 layers, d=512, 6 heads. Not used by tests.
    pub fn large() -> Self {
        Self { enc_layers: 8, dec_layers: 8, d_model: 512, ffn_dim: 1024, heads: 6, ..Self::toy() }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("enc_layers", self.enc_layers),
            ("dec_layers", self.dec_layers),
            ("d_model", self.d_model),
            ("ffn_dim", self.ffn_dim),
            ("heads", self.heads),
            ("vocab", self.vocab),
            ("max_seq", self.max_seq),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!("d_model {} is not divisible by heads {}", self.d_model, self.heads)));
        }
        if self.vocab < 3 {
            return Err(Error::Config("vocab must include the three reserved ids".into()));
        }
        Ok(())
    }
}
