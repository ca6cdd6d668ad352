//! Momentum SGD with a one-cycle schedule, early stopping on validation MSE,
//! and regression metrics.

mod metrics;
mod schedule;

use std::io::Write;

use ndarray::Zip;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{augment_with, Sample, Split};
use crate::geometry::BinaryImage;
use crate::layout::layout_to_image_at;
use crate::model::{backward, decays, predict_value, ModelConfig, ModelError, ModelParams};

pub use metrics::{metrics, Metrics};
pub use schedule::{one_cycle_lr, ScheduleConfig};

/// Minimum validation-loss decrease that counts as an improvement.
pub const IMPROVEMENT_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("step {step} outside schedule of {total_steps} steps")]
    StepOutOfRange { step: usize, total_steps: usize },
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_lr: f64,
    pub epochs: usize,
    pub weight_decay: f64,
    pub patience: usize,
    pub augment_prob: f64,
    pub seed: u64,
    pub schedule: ScheduleConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            max_lr: 1e-6,
            epochs: 500,
            weight_decay: 1e-4,
            patience: 30,
            augment_prob: 0.05,
            seed: 0,
            schedule: ScheduleConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self, TrainError> {
        let cfg: Self = toml::from_str(text).map_err(|e| TrainError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.batch_size == 0 || self.epochs == 0 || self.patience == 0 {
            return bad("batch_size, epochs and patience must be positive");
        }
        if self.patience >= self.epochs {
            return bad("patience must be smaller than epochs");
        }
        if !(self.max_lr.is_finite() && self.max_lr > 0.0) {
            return bad("max_lr must be positive");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.augment_prob) {
            return bad("augment_prob must lie in [0, 1]");
        }
        let s = &self.schedule;
        if !(s.pct_start > 0.0 && s.pct_start < 1.0) {
            return bad("pct_start must lie in (0, 1)");
        }
        if !(s.div_factor > 0.0 && s.final_div_factor > 0.0) {
            return bad("div factors must be positive");
        }
        let [lo, hi] = s.momentum_range;
        if !(0.0 <= lo && lo <= hi && hi < 1.0) {
            return bad("momentum_range must satisfy 0 <= base <= max < 1");
        }
        Ok(())
    }
}

/// Patience counter: stops after `patience` consecutive epochs without a
/// strict improvement.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: Option<usize>,
    since: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: None,
            since: 0,
        }
    }

    /// Records an epoch's validation loss; returns whether it is the new best.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> bool {
        if loss < self.best - IMPROVEMENT_EPS {
            self.best = loss;
            self.best_epoch = Some(epoch);
            self.since = 0;
            true
        } else {
            self.since += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.since >= self.patience
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best_epoch.map(|e| (e, self.best))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Rate used for the epoch's last update.
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

pub fn write_history_csv<W: Write>(history: &[EpochRecord], mut out: W) -> std::io::Result<()> {
    writeln!(out, "epoch,train_loss,val_loss,lr")?;
    for r in history {
        writeln!(out, "{},{},{},{}", r.epoch, r.train_loss, r.val_loss, r.lr)?;
    }
    out.flush()
}

fn rasterize(samples: &[&Sample], cfg: &ModelConfig) -> Result<Vec<(BinaryImage, f64)>, TrainError> {
    samples
        .par_iter()
        .map(|s| {
            if cfg.image_size < 16 {
                return Err(TrainError::Config("image_size must be at least 16".into()));
            }
            Ok((layout_to_image_at(&s.layout, cfg.image_size), s.mean_resets))
        })
        .collect()
}

fn mse(params: &ModelParams, cfg: &ModelConfig, data: &[(BinaryImage, f64)]) -> Result<f64, ModelError> {
    let sq = data
        .par_iter()
        .map(|(img, y)| predict_value(params, cfg, img).map(|p| (p - y) * (p - y)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(sq.iter().sum::<f64>() / data.len() as f64)
}

/// Affine label standardization, `(y - mean) / std`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelScale {
    pub mean: f64,
    pub std: f64,
}

impl LabelScale {
    /// Mean and sample standard deviation; a zero or undefined spread maps
    /// to 1.
    pub fn fit(labels: impl Iterator<Item = f64>) -> Self {
        let v: Vec<f64> = labels.collect();
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = if v.len() > 1 {
            v.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        let std = if var > 0.0 && var.is_finite() { var.sqrt() } else { 1.0 };
        Self { mean, std }
    }

    pub fn forward(&self, y: f64) -> f64 {
        (y - self.mean) / self.std
    }

    pub fn var(&self) -> f64 {
        self.std * self.std
    }

    /// Parameters whose output is `mean + std * output(params)`; exact because
    /// the head's last layer is linear.
    pub fn fold_into_head(&self, params: &ModelParams) -> ModelParams {
        let mut out = params.clone();
        out.head_w *= self.std;
        out.head_b[0] = self.mean + self.std * out.head_b[0];
        out
    }
}

/// Momentum SGD in the usual form (`buf = m * buf + g; p -= lr * buf`),
/// preceded by decoupled weight decay `p *= 1 - lr * wd` on matrix weights.
struct Sgd {
    momentum: ModelParams,
}

impl Sgd {
    fn step(&mut self, params: &mut ModelParams, grads: &ModelParams, lr: f64, mom: f64, wd: f64) {
        for (((name, mut p), (_, g)), (_, mut buf)) in params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.momentum.tensors_mut())
        {
            let shrink = if decays(&name, p.ndim()) { 1.0 - lr * wd } else { 1.0 };
            Zip::from(&mut p).and(&g).and(&mut buf).for_each(|p, &g, b| {
                *b = mom * *b + g;
                *p = *p * shrink - lr * *b;
            });
        }
    }
}

/// Trains on the `train` split and early-stops on the `val` split. Without
/// `initial` parameters the model is freshly initialized from the seed. In
/// both cases the head is re-initialized. Targets are standardized with the
/// training-label mean and std during optimization and folded back into the
/// head, so the returned head bias starts from the mean training label.
pub fn train(
    samples: &[Sample],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    initial: Option<ModelParams>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    model_cfg.validate()?;
    let pick = |split| samples.iter().filter(|s| s.split == split).collect::<Vec<_>>();
    let (train_set, val_set) = (pick(Split::Train), pick(Split::Val));
    if train_set.is_empty() || val_set.is_empty() {
        return Err(TrainError::Config(format!(
            "need non-empty train and val splits, got {} and {}",
            train_set.len(),
            val_set.len()
        )));
    }
    let mut train_data = rasterize(&train_set, model_cfg)?;
    let mut val_data = rasterize(&val_set, model_cfg)?;

    // fit standardized targets and fold the scale back into the head
    let scale = LabelScale::fit(train_data.iter().map(|(_, y)| *y));
    for (_, y) in train_data.iter_mut().chain(val_data.iter_mut()) {
        *y = scale.forward(*y);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = match initial {
        Some(p) => {
            if !p.matches(model_cfg) {
                return Err(TrainError::Config("initial parameters do not match the model config".into()));
            }
            p
        }
        None => ModelParams::init(model_cfg, cfg.seed)?,
    };
    params.reset_head(0.0, &mut rng);

    let batches_per_epoch = train_data.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches_per_epoch;
    let mut sgd = Sgd {
        momentum: ModelParams::zeros(model_cfg),
    };
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best_params = scale.fold_into_head(&params);
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train_data.len()).collect();
    let mut step = 0;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch = idx
                .iter()
                .map(|&i| {
                    let (img, y) = &train_data[i];
                    let img = if cfg.augment_prob > 0.0 {
                        augment_with(img, cfg.augment_prob, &mut rng)?
                    } else {
                        img.clone()
                    };
                    Ok((img, *y))
                })
                .collect::<Result<Vec<_>, TrainError>>()?;
            let (loss, grads) = backward(&params, model_cfg, &batch).map_err(|e| match e {
                ModelError::NonFinite { .. } => TrainError::NonFinite { epoch, batch: bi },
                other => other.into(),
            })?;
            if !loss.is_finite() {
                return Err(TrainError::NonFinite { epoch, batch: bi });
            }
            let (rate, mom) = one_cycle_lr(step, total_steps, cfg.max_lr, &cfg.schedule)?;
            sgd.step(&mut params, &grads, rate, mom, cfg.weight_decay);
            lr = rate;
            loss_sum += loss * batch.len() as f64;
            step += 1;
        }
        if !params.all_finite() {
            return Err(TrainError::NonFinite {
                epoch,
                batch: batches_per_epoch - 1,
            });
        }
        let train_loss = loss_sum / train_data.len() as f64 * scale.var();
        let val_loss = scale.var() * mse(&params, model_cfg, &val_data).map_err(|e| match e {
            ModelError::NonFinite { .. } => TrainError::NonFinite {
                epoch,
                batch: batches_per_epoch - 1,
            },
            other => other.into(),
        })?;
        log::info!("epoch {epoch}: train {train_loss:.6} val {val_loss:.6} lr {lr:.3e}");
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr,
        });
        if stopper.observe(epoch, val_loss) {
            best_params = scale.fold_into_head(&params);
        }
        if stopper.should_stop() {
            log::info!("early stop after epoch {epoch}");
            break;
        }
    }
    let (best_epoch, best_val_loss) = stopper.best().ok_or_else(|| {
        TrainError::Config("validation loss never became finite".into())
    })?;
    Ok(TrainOutcome {
        params: best_params,
        history,
        best_epoch,
        best_val_loss,
    })
}

/// Predictions for `samples`, in order, without augmentation.
pub fn predict_samples(
    params: &ModelParams,
    cfg: &ModelConfig,
    samples: &[Sample],
) -> Result<Vec<f64>, TrainError> {
    samples
        .par_iter()
        .map(|s| {
            let img = layout_to_image_at(&s.layout, cfg.image_size);
            Ok(predict_value(params, cfg, &img)?)
        })
        .collect()
}

pub fn evaluate(
    params: &ModelParams,
    cfg: &ModelConfig,
    samples: &[Sample],
) -> Result<Metrics, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::Config("no samples to evaluate".into()));
    }
    let predicted = predict_samples(params, cfg, samples)?;
    let actual: Vec<f64> = samples.iter().map(|s| s.mean_resets).collect();
    metrics(&predicted, &actual)
}
