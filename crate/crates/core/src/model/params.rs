use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ModelConfig, ModelError};

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub norm1_w: Array1<f64>,
    pub norm1_b: Array1<f64>,
    pub q_w: Array2<f64>,
    pub q_b: Array1<f64>,
    pub k_w: Array2<f64>,
    pub k_b: Array1<f64>,
    pub v_w: Array2<f64>,
    pub v_b: Array1<f64>,
    pub proj_w: Array2<f64>,
    pub proj_b: Array1<f64>,
    pub norm2_w: Array1<f64>,
    pub norm2_b: Array1<f64>,
    pub fc1_w: Array2<f64>,
    pub fc1_b: Array1<f64>,
    pub fc2_w: Array2<f64>,
    pub fc2_b: Array1<f64>,
}

/// All trainable tensors. Linear weights are stored input-major
/// (`in × out`) so a row vector times the weight is the layer output.
/// Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub patch_w: Array2<f64>,
    pub patch_b: Array1<f64>,
    pub cls: Array1<f64>,
    pub pos: Array2<f64>,
    pub blocks: Vec<BlockParams>,
    pub norm_w: Array1<f64>,
    pub norm_b: Array1<f64>,
    pub head_hidden: Option<(Array2<f64>, Array1<f64>)>,
    pub head_w: Array2<f64>,
    pub head_b: Array1<f64>,
}

impl ModelParams {
    /// All-zero tensors shaped for `cfg`.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.embed_dim;
        let m = cfg.mlp_hidden();
        let block = || BlockParams {
            norm1_w: Array1::zeros(d),
            norm1_b: Array1::zeros(d),
            q_w: Array2::zeros((d, d)),
            q_b: Array1::zeros(d),
            k_w: Array2::zeros((d, d)),
            k_b: Array1::zeros(d),
            v_w: Array2::zeros((d, d)),
            v_b: Array1::zeros(d),
            proj_w: Array2::zeros((d, d)),
            proj_b: Array1::zeros(d),
            norm2_w: Array1::zeros(d),
            norm2_b: Array1::zeros(d),
            fc1_w: Array2::zeros((d, m)),
            fc1_b: Array1::zeros(m),
            fc2_w: Array2::zeros((m, d)),
            fc2_b: Array1::zeros(d),
        };
        let head_in = cfg.head_hidden.unwrap_or(d);
        Self {
            patch_w: Array2::zeros((cfg.patch_dim(), d)),
            patch_b: Array1::zeros(d),
            cls: Array1::zeros(d),
            pos: Array2::zeros((cfg.tokens(), d)),
            blocks: (0..cfg.depth).map(|_| block()).collect(),
            norm_w: Array1::zeros(d),
            norm_b: Array1::zeros(d),
            head_hidden: cfg.head_hidden.map(|h| (Array2::zeros((d, h)), Array1::zeros(h))),
            head_w: Array2::zeros((head_in, 1)),
            head_b: Array1::zeros(1),
        }
    }

    /// Truncated normal (std 0.02, cut at two std) for weights and
    /// embeddings, unit layer-norm gains, zero biases, and a fresh head.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(cfg);
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        for (name, mut t) in p.tensors_mut() {
            if name.starts_with("head.") {
                continue;
            }
            if name.ends_with("norm1.weight")
                || name.ends_with("norm2.weight")
                || name == "norm.weight"
            {
                t.fill(1.0);
            } else if name.ends_with(".weight") || name == "cls_token" || name == "pos_embed" {
                t.mapv_inplace(|_| loop {
                    let v: f64 = normal.sample(&mut rng);
                    if v.abs() <= 0.04 {
                        break v;
                    }
                });
            }
        }
        p.reset_head(0.0, &mut rng);
        Ok(p)
    }

    /// Fresh regression head: weights uniform in `±1/sqrt(fan_in)`, output
    /// bias set to `bias` (normally the training label mean).
    pub fn reset_head<R: Rng + ?Sized>(&mut self, bias: f64, rng: &mut R) {
        let uniform = |a: &mut Array2<f64>, rng: &mut R| {
            let bound = 1.0 / (a.nrows() as f64).sqrt();
            a.mapv_inplace(|_| rng.gen_range(-bound..=bound));
        };
        if let Some((w, b)) = self.head_hidden.as_mut() {
            uniform(w, rng);
            b.fill(0.0);
        }
        uniform(&mut self.head_w, rng);
        self.head_b.fill(bias);
    }

    pub fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        tensor_list_ref(self)
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        tensor_list_mut(self)
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Shapes consistent with `cfg`, in the same order and naming.
    pub fn matches(&self, cfg: &ModelConfig) -> bool {
        let ours = self.tensors();
        let want = cfg.tensor_shapes();
        ours.len() == want.len()
            && ours
                .iter()
                .zip(&want)
                .all(|((n, t), (wn, ws))| n == wn && t.shape() == ws.as_slice())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        for ((_, mut a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            Zip::from(&mut a).and(&b).for_each(|x, &y| *x += scale * y);
        }
    }

    /// Values rounded through f32, as stored on disk.
    pub fn round_to_f32(&mut self) {
        for (_, mut t) in self.tensors_mut() {
            t.mapv_inplace(|v| v as f32 as f64);
        }
    }
}

fn tensor_list_ref(p: &ModelParams) -> Vec<(String, ArrayViewD<'_, f64>)> {
    let mut out: Vec<(String, ArrayViewD<'_, f64>)> = vec![
        ("patch_embed.weight".into(), p.patch_w.view().into_dyn()),
        ("patch_embed.bias".into(), p.patch_b.view().into_dyn()),
        ("cls_token".into(), p.cls.view().into_dyn()),
        ("pos_embed".into(), p.pos.view().into_dyn()),
    ];
    for (i, b) in p.blocks.iter().enumerate() {
        let names = block_names(i);
        let views = [
            b.norm1_w.view().into_dyn(),
            b.norm1_b.view().into_dyn(),
            b.q_w.view().into_dyn(),
            b.q_b.view().into_dyn(),
            b.k_w.view().into_dyn(),
            b.k_b.view().into_dyn(),
            b.v_w.view().into_dyn(),
            b.v_b.view().into_dyn(),
            b.proj_w.view().into_dyn(),
            b.proj_b.view().into_dyn(),
            b.norm2_w.view().into_dyn(),
            b.norm2_b.view().into_dyn(),
            b.fc1_w.view().into_dyn(),
            b.fc1_b.view().into_dyn(),
            b.fc2_w.view().into_dyn(),
            b.fc2_b.view().into_dyn(),
        ];
        out.extend(names.into_iter().zip(views));
    }
    out.push(("norm.weight".into(), p.norm_w.view().into_dyn()));
    out.push(("norm.bias".into(), p.norm_b.view().into_dyn()));
    if let Some((w, b)) = &p.head_hidden {
        out.push(("head.hidden.weight".into(), w.view().into_dyn()));
        out.push(("head.hidden.bias".into(), b.view().into_dyn()));
    }
    out.push(("head.weight".into(), p.head_w.view().into_dyn()));
    out.push(("head.bias".into(), p.head_b.view().into_dyn()));
    out
}

fn tensor_list_mut(p: &mut ModelParams) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
    let mut out: Vec<(String, ArrayViewMutD<'_, f64>)> = vec![
        ("patch_embed.weight".into(), p.patch_w.view_mut().into_dyn()),
        ("patch_embed.bias".into(), p.patch_b.view_mut().into_dyn()),
        ("cls_token".into(), p.cls.view_mut().into_dyn()),
        ("pos_embed".into(), p.pos.view_mut().into_dyn()),
    ];
    for (i, b) in p.blocks.iter_mut().enumerate() {
        let names = block_names(i);
        let views = [
            b.norm1_w.view_mut().into_dyn(),
            b.norm1_b.view_mut().into_dyn(),
            b.q_w.view_mut().into_dyn(),
            b.q_b.view_mut().into_dyn(),
            b.k_w.view_mut().into_dyn(),
            b.k_b.view_mut().into_dyn(),
            b.v_w.view_mut().into_dyn(),
            b.v_b.view_mut().into_dyn(),
            b.proj_w.view_mut().into_dyn(),
            b.proj_b.view_mut().into_dyn(),
            b.norm2_w.view_mut().into_dyn(),
            b.norm2_b.view_mut().into_dyn(),
            b.fc1_w.view_mut().into_dyn(),
            b.fc1_b.view_mut().into_dyn(),
            b.fc2_w.view_mut().into_dyn(),
            b.fc2_b.view_mut().into_dyn(),
        ];
        out.extend(names.into_iter().zip(views));
    }
    out.push(("norm.weight".into(), p.norm_w.view_mut().into_dyn()));
    out.push(("norm.bias".into(), p.norm_b.view_mut().into_dyn()));
    if let Some((w, b)) = &mut p.head_hidden {
        out.push(("head.hidden.weight".into(), w.view_mut().into_dyn()));
        out.push(("head.hidden.bias".into(), b.view_mut().into_dyn()));
    }
    out.push(("head.weight".into(), p.head_w.view_mut().into_dyn()));
    out.push(("head.bias".into(), p.head_b.view_mut().into_dyn()));
    out
}

fn block_names(i: usize) -> [String; 16] {
    [
        "norm1.weight",
        "norm1.bias",
        "attn.q.weight",
        "attn.q.bias",
        "attn.k.weight",
        "attn.k.bias",
        "attn.v.weight",
        "attn.v.bias",
        "attn.proj.weight",
        "attn.proj.bias",
        "norm2.weight",
        "norm2.bias",
        "mlp.fc1.weight",
        "mlp.fc1.bias",
        "mlp.fc2.weight",
        "mlp.fc2.bias",
    ]
    .map(|s| format!("blocks.{i}.{s}"))
}

/// Whether decoupled weight decay applies: matrix weights only. Norm gains,
/// biases, the class token and positional embeddings are exempt.
pub fn decays(name: &str, ndim: usize) -> bool {
    ndim == 2 && name.ends_with(".weight")
}
