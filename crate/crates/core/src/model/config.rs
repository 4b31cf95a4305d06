use serde::{Deserialize, Serialize};

use super::ModelError;

/// Hyperparameters of the encoder–decoder. The vocabulary travels with the
/// model itself, not with the config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ffn: usize,
    pub dropout: f64,
    pub label_smoothing: f64,
    pub max_positions: usize,
    pub tied_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 2,
            n_layers: 2,
            d_ffn: 128,
            dropout: 0.3,
            label_smoothing: 0.1,
            max_positions: 128,
            tied_embeddings: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::Config(msg));
        if self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 || self.d_ffn == 0 || self.max_positions == 0 {
            return bad("d_model, n_heads, n_layers, d_ffn and max_positions must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!("n_heads {} does not divide d_model {}", self.n_heads, self.d_model));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(format!("label_smoothing {} outside [0, 1)", self.label_smoothing));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    SourceToTarget,
    TargetToSource,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::SourceToTarget => "s2t",
            Direction::TargetToSource => "t2s",
        }
    }

    pub fn code(self) -> u64 {
        match self {
            Direction::SourceToTarget => 0,
            Direction::TargetToSource => 1,
        }
    }
}
