use serde::{Deserialize, Serialize};

use super::ModelError;

/// Architecture hyperparameters. The default is ViT-B/16 at 224 px.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Width of an optional GELU hidden layer in the regression head.
    pub head_hidden: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::vit_b16()
    }
}

/// Upper bound on any single dimension, so that hostile configs cannot ask
/// for absurd allocations.
const MAX_DIM: usize = 1 << 14;

impl ModelConfig {
    pub fn vit_b16() -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            in_channels: 3,
            embed_dim: 768,
            depth: 12,
            heads: 12,
            mlp_ratio: 4,
            head_hidden: None,
        }
    }

    /// A small model over 224 px inputs, fast enough for desk-scale training.
    pub fn toy() -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            in_channels: 3,
            embed_dim: 16,
            depth: 1,
            heads: 2,
            mlp_ratio: 2,
            head_hidden: None,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, ModelError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ModelError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.into()));
        let dims = [
            self.image_size,
            self.patch_size,
            self.in_channels,
            self.embed_dim,
            self.depth,
            self.heads,
            self.mlp_ratio,
        ];
        if dims.iter().any(|&d| d == 0 || d > MAX_DIM) {
            return bad("every dimension must be between 1 and 16384");
        }
        if self.image_size % self.patch_size != 0 {
            return bad("image_size must be divisible by patch_size");
        }
        if self.embed_dim % self.heads != 0 {
            return bad("embed_dim must be divisible by heads");
        }
        if matches!(self.head_hidden, Some(w) if w == 0 || w > MAX_DIM) {
            return bad("head_hidden must be between 1 and 16384");
        }
        if self.depth > 256 || self.grid() > 1024 {
            return bad("model is too large");
        }
        Ok(())
    }

    /// Patches per side.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Patches plus the class token.
    pub fn tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.in_channels
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn mlp_hidden(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }

    /// Name and shape of every tensor, in file order.
    pub fn tensor_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.embed_dim;
        let m = self.mlp_hidden();
        let mut out = vec![
            ("patch_embed.weight".to_string(), vec![self.patch_dim(), d]),
            ("patch_embed.bias".to_string(), vec![d]),
            ("cls_token".to_string(), vec![d]),
            ("pos_embed".to_string(), vec![self.tokens(), d]),
        ];
        for i in 0..self.depth {
            let p = |s: &str| format!("blocks.{i}.{s}");
            out.extend([
                (p("norm1.weight"), vec![d]),
                (p("norm1.bias"), vec![d]),
                (p("attn.q.weight"), vec![d, d]),
                (p("attn.q.bias"), vec![d]),
                (p("attn.k.weight"), vec![d, d]),
                (p("attn.k.bias"), vec![d]),
                (p("attn.v.weight"), vec![d, d]),
                (p("attn.v.bias"), vec![d]),
                (p("attn.proj.weight"), vec![d, d]),
                (p("attn.proj.bias"), vec![d]),
                (p("norm2.weight"), vec![d]),
                (p("norm2.bias"), vec![d]),
                (p("mlp.fc1.weight"), vec![d, m]),
                (p("mlp.fc1.bias"), vec![m]),
                (p("mlp.fc2.weight"), vec![m, d]),
                (p("mlp.fc2.bias"), vec![d]),
            ]);
        }
        out.push(("norm.weight".to_string(), vec![d]));
        out.push(("norm.bias".to_string(), vec![d]));
        let head_in = match self.head_hidden {
            Some(h) => {
                out.push(("head.hidden.weight".to_string(), vec![d, h]));
                out.push(("head.hidden.bias".to_string(), vec![h]));
                h
            }
            None => d,
        };
        out.push(("head.weight".to_string(), vec![head_in, 1]));
        out.push(("head.bias".to_string(), vec![1]));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensor_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}
