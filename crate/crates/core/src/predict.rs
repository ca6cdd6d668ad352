//! Layout in, predicted reset count and attention heatmap out.

use serde::{Deserialize, Serialize};

use crate::layout::{layout_to_image_at, Layout};
use crate::model::{attention_rollout, forward, Heatmap, ModelConfig, ModelError, ModelParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub resets: f64,
    pub heatmap: Heatmap,
}

/// A loaded model, shareable across threads for concurrent inference.
#[derive(Debug, Clone)]
pub struct Predictor {
    pub params: ModelParams,
    pub config: ModelConfig,
}

impl Predictor {
    pub fn new(params: ModelParams, config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        if !params.matches(&config) {
            return Err(ModelError::Config("parameters do not match the config".into()));
        }
        Ok(Self { params, config })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let (params, config) = crate::model::deserialize(bytes)?;
        Self::new(params, config)
    }

    pub fn predict(&self, layout: &Layout) -> Result<Prediction, ModelError> {
        let image = layout_to_image_at(layout, self.config.image_size);
        let out = forward(&self.params, &self.config, &image)?;
        Ok(Prediction {
            resets: out.output,
            heatmap: attention_rollout(&out.attention)?,
        })
    }
}
