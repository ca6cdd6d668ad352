use ndarray::{s, Array2, Axis};
use serde::{Deserialize, Serialize};

use super::ModelError;

/// Square patch-grid heatmap, row-major, row 0 at the top of the room.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub size: usize,
    pub values: Vec<Vec<f64>>,
}

impl Heatmap {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row][col]
    }

    /// Rescales to `[0, 1]`. A constant map (spread within 1e-12 of its
    /// scale) becomes all zeros.
    fn normalized(size: usize, raw: &[f64]) -> Self {
        let min = raw.iter().copied().fold(f64::INFINITY, f64::min);
        let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let spread = max - min;
        let flat: Vec<f64> = if spread <= 1e-12 * max.abs().max(1e-300) || !spread.is_finite() {
            vec![0.0; raw.len()]
        } else {
            raw.iter().map(|v| (v - min) / spread).collect()
        };
        Self {
            size,
            values: flat.chunks(size).map(<[f64]>::to_vec).collect(),
        }
    }

    /// Grayscale bytes, 255 for the hottest patch.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{0} {0}\n255\n", self.size).into_bytes();
        for row in &self.values {
            out.extend(row.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        }
        out
    }
}

/// Head-averaged attention with the residual path mixed in, rows normalized.
fn mixed(layer: &[Array2<f64>]) -> Result<Array2<f64>, ModelError> {
    let first = layer
        .first()
        .ok_or_else(|| ModelError::Config("layer without heads".into()))?;
    let n = first.nrows();
    let mut mean = Array2::<f64>::zeros((n, n));
    for a in layer {
        if a.nrows() != a.ncols() || a.nrows() != n {
            return Err(ModelError::Shape {
                expected: vec![n, n],
                found: a.shape().to_vec(),
            });
        }
        mean += a;
    }
    mean /= layer.len() as f64;
    let mut out = mean * 0.5 + Array2::<f64>::eye(n) * 0.5;
    for mut row in out.axis_iter_mut(Axis(0)) {
        let sum = row.sum();
        row /= sum;
    }
    Ok(out)
}

/// Rollout product `R = Ã_L ··· Ã_1`, each factor row-stochastic.
pub fn rollout_matrix(attention: &[Vec<Array2<f64>>]) -> Result<Array2<f64>, ModelError> {
    let mut layers = attention.iter();
    let first = layers
        .next()
        .ok_or_else(|| ModelError::Config("rollout needs at least one layer".into()))?;
    let mut r = mixed(first)?;
    for layer in layers {
        let a = mixed(layer)?;
        if a.nrows() != r.nrows() {
            return Err(ModelError::Shape {
                expected: vec![r.nrows(), r.nrows()],
                found: a.shape().to_vec(),
            });
        }
        r = a.dot(&r);
    }
    Ok(r)
}

/// Class-token row of the rollout over patch columns, reshaped to the patch
/// grid and min-max normalized.
pub fn attention_rollout(attention: &[Vec<Array2<f64>>]) -> Result<Heatmap, ModelError> {
    let r = rollout_matrix(attention)?;
    let patches = r.ncols() - 1;
    let size = (patches as f64).sqrt().round() as usize;
    if size * size != patches {
        return Err(ModelError::Shape {
            expected: vec![size * size + 1],
            found: vec![r.ncols()],
        });
    }
    let row: Vec<f64> = r.slice(s![0, 1..]).to_vec();
    Ok(Heatmap::normalized(size, &row))
}
