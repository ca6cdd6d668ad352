//! Backbone import from a safetensors state dict, driven by the translation
//! table in `pretrained_names.txt`.

use ndarray::{ArrayD, ArrayViewMutD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use safetensors::{Dtype, SafeTensors};

use super::{ModelConfig, ModelError, ModelParams};

/// The shipped name table.
pub const NAME_TABLE: &str = include_str!("pretrained_names.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Transform {
    Copy,
    Transpose,
    Conv,
    Part(usize),
}

#[derive(Debug, Clone, PartialEq)]
struct Mapping {
    ours: String,
    source: String,
    transform: Transform,
}

fn parse_table(table: &str, depth: usize) -> Result<Vec<Mapping>, ModelError> {
    let mut out = Vec::new();
    for (n, line) in table.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [ours, source, t] = fields[..] else {
            return Err(ModelError::Import(format!("name table line {}: expected 3 fields", n + 1)));
        };
        let transform = match t {
            "copy" => Transform::Copy,
            "transpose" => Transform::Transpose,
            "conv" => Transform::Conv,
            "q" => Transform::Part(0),
            "k" => Transform::Part(1),
            "v" => Transform::Part(2),
            other => {
                return Err(ModelError::Import(format!(
                    "name table line {}: unknown transform {other}",
                    n + 1
                )))
            }
        };
        if ours.contains("{i}") {
            for i in 0..depth {
                out.push(Mapping {
                    ours: ours.replace("{i}", &i.to_string()),
                    source: source.replace("{i}", &i.to_string()),
                    transform,
                });
            }
        } else {
            out.push(Mapping {
                ours: ours.into(),
                source: source.into(),
                transform,
            });
        }
    }
    Ok(out)
}

fn to_f64(view: &safetensors::tensor::TensorView<'_>, name: &str) -> Result<Vec<f64>, ModelError> {
    let data = view.data();
    match view.dtype() {
        Dtype::F32 => Ok(data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect()),
        Dtype::F64 => Ok(data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect()),
        other => Err(ModelError::Import(format!(
            "tensor {name}: unsupported dtype {other:?}, expected F32 or F64"
        ))),
    }
}

/// Source shape the transform expects for destination shape `ours`.
fn expected_source(t: Transform, ours: &[usize], cfg: &ModelConfig) -> Vec<usize> {
    match t {
        Transform::Copy => ours.to_vec(),
        Transform::Transpose => ours.iter().rev().copied().collect(),
        Transform::Conv => vec![ours[1], cfg.in_channels, cfg.patch_size, cfg.patch_size],
        Transform::Part(_) => match ours {
            [d, _] => vec![3 * d, *d],
            [d] => vec![3 * d],
            _ => ours.to_vec(),
        },
    }
}

fn strip_leading_ones(shape: &[usize]) -> &[usize] {
    let k = shape.iter().take_while(|&&d| d == 1).count();
    &shape[k.min(shape.len().saturating_sub(1))..]
}

fn fill(
    dest: &mut ArrayViewMutD<f64>,
    t: Transform,
    src: ArrayD<f64>,
) -> Result<(), ModelError> {
    let d = dest.shape().to_vec();
    let values: ArrayD<f64> = match t {
        Transform::Copy => src
            .into_shape(IxDyn(&d))
            .map_err(|e| ModelError::Import(e.to_string()))?,
        Transform::Transpose => src.reversed_axes(),
        Transform::Conv => {
            let out_dim = src.shape()[0];
            let flat = src
                .into_shape(IxDyn(&[out_dim, d[0]]))
                .map_err(|e| ModelError::Import(e.to_string()))?;
            flat.reversed_axes()
        }
        Transform::Part(k) => {
            let n = d[0];
            let part = src.slice_axis(ndarray::Axis(0), ndarray::Slice::from(k * n..(k + 1) * n));
            if d.len() == 2 {
                part.to_owned().reversed_axes()
            } else {
                part.to_owned()
            }
        }
    };
    dest.assign(&values);
    Ok(())
}

/// Loads the backbone from safetensors `bytes` into a model shaped by `cfg`
/// and initializes a fresh head with output bias `label_mean`. Every missing
/// source tensor is listed in the error.
pub fn import_pretrained(
    bytes: &[u8],
    cfg: &ModelConfig,
    seed: u64,
    label_mean: f64,
) -> Result<ModelParams, ModelError> {
    import_with_table(bytes, cfg, NAME_TABLE, seed, label_mean)
}

pub fn import_with_table(
    bytes: &[u8],
    cfg: &ModelConfig,
    table: &str,
    seed: u64,
    label_mean: f64,
) -> Result<ModelParams, ModelError> {
    cfg.validate()?;
    let st = SafeTensors::deserialize(bytes)
        .map_err(|e| ModelError::Import(format!("not a safetensors file: {e}")))?;
    let mappings = parse_table(table, cfg.depth)?;

    let mut missing: Vec<String> = Vec::new();
    for m in &mappings {
        if st.tensor(&m.source).is_err() && !missing.contains(&m.source) {
            missing.push(m.source.clone());
        }
    }
    if !missing.is_empty() {
        return Err(ModelError::MissingTensors(missing));
    }

    let mut params = ModelParams::zeros(cfg);
    for (name, mut dest) in params.tensors_mut() {
        if name.starts_with("head.") {
            continue;
        }
        let m = mappings
            .iter()
            .find(|m| m.ours == name)
            .ok_or_else(|| ModelError::Import(format!("name table has no entry for {name}")))?;
        let view = st.tensor(&m.source).expect("checked above");
        let expected = expected_source(m.transform, dest.shape(), cfg);
        let found = view.shape().to_vec();
        let ok = match m.transform {
            Transform::Copy => strip_leading_ones(&found) == strip_leading_ones(&expected),
            _ => found == expected,
        };
        if !ok {
            return Err(ModelError::ImportShape {
                name: m.source.clone(),
                expected,
                found,
            });
        }
        let values = to_f64(&view, &m.source)?;
        let src = ArrayD::from_shape_vec(IxDyn(&found), values)
            .map_err(|e| ModelError::Import(format!("tensor {}: {e}", m.source)))?;
        fill(&mut dest, m.transform, src)?;
    }
    if !params.all_finite() {
        return Err(ModelError::Import("pretrained weights contain non-finite values".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    params.reset_head(label_mean, &mut rng);
    Ok(params)
}
