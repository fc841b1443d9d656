use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hadamard;

/// Shape hyperparameters of the toy decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub hidden_dim: usize,
    pub n_heads: usize,
    pub mlp_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub rms_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 8,
            hidden_dim: 128,
            n_heads: 4,
            mlp_dim: 512,
            vocab_size: 256,
            max_seq_len: 64,
            rms_eps: 1e-6,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let c = self.hidden_dim;
        if c < 2 {
            return Err(Error::input("hidden_dim must be at least 2"));
        }
        if self.n_heads == 0 || c % self.n_heads != 0 {
            return Err(Error::input(format!(
                "hidden_dim {c} is not divisible by n_heads {}",
                self.n_heads
            )));
        }
        if hadamard::factorize(c).is_none() {
            return Err(Error::input(format!(
                "hidden_dim {c} has no Hadamard factorization"
            )));
        }
        if self.vocab_size == 0 || self.max_seq_len == 0 || self.mlp_dim == 0 {
            return Err(Error::input(
                "vocab_size, max_seq_len and mlp_dim must be positive",
            ));
        }
        if !(self.rms_eps > 0.0) {
            return Err(Error::input("rms_eps must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.n_heads
    }
}
