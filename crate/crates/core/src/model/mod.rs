//! Vision Transformer regressor: patch embedding, pre-norm encoder, scalar
//! head, exact gradients and attention rollout. Everything runs in f64;
//! parameters are stored on disk as f32.

mod config;
mod format;
mod forward;
mod params;
mod pretrained;
mod rollout;

use thiserror::Error;

pub use config::ModelConfig;
pub use format::{deserialize, serialize, MAGIC, VERSION};
pub use forward::{backward, forward, patchify, predict_value, ForwardOutput};
pub use params::{decays, BlockParams, ModelParams};
pub use pretrained::{import_pretrained, import_with_table, NAME_TABLE};
pub use rollout::{attention_rollout, rollout_matrix, Heatmap};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    Shape {
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("non-finite values after {layer}")]
    NonFinite { layer: String },
    #[error("model file: {0}")]
    Format(String),
    #[error("pretrained import: {0}")]
    Import(String),
    #[error("pretrained import: missing tensors {}", .0.join(", "))]
    MissingTensors(Vec<String>),
    #[error("pretrained import: tensor {name} expected shape {expected:?}, found {found:?}")]
    ImportShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

/// Reads a model file from disk.
pub fn load(path: &std::path::Path) -> Result<(ModelParams, ModelConfig), ModelError> {
    let bytes = std::fs::read(path)
        .map_err(|e| ModelError::Format(format!("{}: {e}", path.display())))?;
    deserialize(&bytes)
}
