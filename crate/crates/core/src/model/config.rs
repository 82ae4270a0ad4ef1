use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture of the gated-attention encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub heads_per_layer: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub dropout_p: f32,
    pub tie_mlm_head_to_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            heads_per_layer: 4,
            d_model: 64,
            d_ff: 128,
            vocab_size: 2048,
            max_seq_len: 64,
            dropout_p: 0.1,
            tie_mlm_head_to_embeddings: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("num_layers", self.num_layers),
            ("heads_per_layer", self.heads_per_layer),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} >= 1 (got 0)")));
            }
        }
        if self.d_model % self.heads_per_layer != 0 {
            return Err(Error::Config(format!(
                "d_model mod heads_per_layer == 0 (got {} mod {})",
                self.d_model, self.heads_per_layer
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!(
                "0 <= dropout_p < 1 (got {})",
                self.dropout_p
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads_per_layer
    }

    pub fn num_heads(&self) -> usize {
        self.num_layers * self.heads_per_layer
    }
}
