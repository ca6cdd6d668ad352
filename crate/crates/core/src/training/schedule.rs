use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::TrainError;

/// One-cycle schedule constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub pct_start: f64,
    pub div_factor: f64,
    pub final_div_factor: f64,
    /// `[base, max]`: momentum starts at max, dips to base at the peak
    /// learning rate and returns to max.
    pub momentum_range: [f64; 2],
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            pct_start: 0.3,
            div_factor: 25.0,
            final_div_factor: 1e4,
            momentum_range: [0.85, 0.95],
        }
    }
}

/// Cosine interpolation from `start` (pct 0) to `end` (pct 1), exact at
/// both ends.
fn cos_anneal(start: f64, end: f64, pct: f64) -> f64 {
    let w = ((PI * pct).cos() + 1.0) / 2.0;
    start * w + end * (1.0 - w)
}

/// Learning rate and momentum at `step` of `total_steps`. The warm-up phase
/// ends at step `pct_start * total_steps - 1`, where the rate is exactly
/// `max_lr`; the last step reaches `max_lr / (div_factor * final_div_factor)`.
pub fn one_cycle_lr(
    step: usize,
    total_steps: usize,
    max_lr: f64,
    cfg: &ScheduleConfig,
) -> Result<(f64, f64), TrainError> {
    if step >= total_steps {
        return Err(TrainError::StepOutOfRange { step, total_steps });
    }
    let initial = max_lr / cfg.div_factor;
    let min_lr = initial / cfg.final_div_factor;
    let [m_base, m_max] = cfg.momentum_range;
    let peak = cfg.pct_start * total_steps as f64 - 1.0;
    let last = total_steps as f64 - 1.0;
    let s = step as f64;
    if s <= peak {
        let pct = if peak > 0.0 { s / peak } else { 1.0 };
        Ok((cos_anneal(initial, max_lr, pct), cos_anneal(m_max, m_base, pct)))
    } else {
        let pct = if last > peak { (s - peak) / (last - peak) } else { 1.0 };
        Ok((cos_anneal(max_lr, min_lr, pct), cos_anneal(m_base, m_max, pct)))
    }
}
