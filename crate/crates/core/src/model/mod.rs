//! Miniature transformer translation model: architecture, training,
//! checkpoints and incremental decoding state.

mod checkpoint;
mod config;
mod incremental;
mod optim;
mod train;
mod transformer;

use std::path::PathBuf;

use thiserror::Error;

use crate::numerics::NumericsError;

pub use checkpoint::{average_checkpoints, load_checkpoint, save_checkpoint, Checkpoint, FORMAT_VERSION};
pub use config::{Direction, ModelConfig};
pub use incremental::{DecoderState, EncodedSource};
pub use optim::{adam_step, LrSchedule, OptimizerState};
pub use train::{encode_corpus, perplexity, train, LogEntry, Selection, TrainConfig, TrainLog};
pub use transformer::{parameter_layout, positional_table, Example, TranslationModel};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("sequence length {len} exceeds max_positions {max}")]
    LengthOverflow { len: usize, max: usize },
    #[error("token id {id} outside vocabulary of size {size}")]
    OutOfVocab { id: usize, size: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite {what}")]
    NonFinite { what: String },
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("missing parameter {0}")]
    MissingParameter(String),
    #[error("checkpoint shape mismatch on {0}")]
    ShapeMismatch(String),
    #[error("no checkpoints to average")]
    NoCheckpoints,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("{path}: {err}")]
    Io { path: PathBuf, err: std::io::Error },
    #[error("{path}: malformed checkpoint: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("{path}: unsupported checkpoint format version {found} (expected {expected})")]
    Version { path: PathBuf, found: u32, expected: u32 },
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;
