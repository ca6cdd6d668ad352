//! Layouts paired with simulated reset counts: generation, splitting,
//! augmentation, persistence and group statistics.

mod augment;
mod io;
pub mod stats;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::GeometryError;
use crate::layout::{sample_layout, Layout, LayoutError};
use crate::rdwsim::{estimate_resets, mean_std, path_seed, SimConfig, SimError};

pub use augment::{augment, augment_with, AUGMENT_PROB};
pub use io::{
    read_dataset, read_layouts, write_dataset, write_layouts, DATASET_FORMAT, LAYOUTS_FORMAT,
};
pub use stats::{kruskal_wallis, levene, StatsError, StatsReport};

/// Salt separating simulation seeds from layout seeds.
const SIM_SALT: u64 = 0x5349_4D55_4C41_5445;
const MAX_RESAMPLES: u64 = 1000;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: schema violation at `{path}`: {message}")]
    Schema {
        line: usize,
        path: String,
        message: String,
    },
    #[error("line {line}: {source}")]
    Layout {
        line: usize,
        #[source]
        source: LayoutError,
    },
    #[error("missing or invalid header line, expected {expected}")]
    Header { expected: String },
    #[error("sample {id}: {message}")]
    Invariant { id: String, message: String },
    #[error("duplicate sample id {0}")]
    DuplicateId(String),
    #[error("invalid split ratios {0:?}")]
    Ratios([f64; 3]),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    LayoutGen(#[from] LayoutError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Shape(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
    #[default]
    Unassigned,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Unassigned => "unassigned",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "unassigned" => Ok(Split::Unassigned),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub layout: Layout,
    pub per_path_resets: Vec<u32>,
    pub mean_resets: f64,
    pub split: Split,
}

impl Sample {
    pub fn new(id: impl Into<String>, layout: Layout, per_path_resets: Vec<u32>) -> Self {
        let (mean_resets, _) = mean_std(&per_path_resets);
        Self {
            id: id.into(),
            layout,
            per_path_resets,
            mean_resets,
            split: Split::Unassigned,
        }
    }

    pub fn object_count(&self) -> usize {
        self.layout.objects().len()
    }

    /// `per_path_resets` is non-empty and `mean_resets` is its mean.
    pub fn check(&self) -> Result<(), DatasetError> {
        let bad = |message: &str| DatasetError::Invariant {
            id: self.id.clone(),
            message: message.into(),
        };
        if self.per_path_resets.is_empty() {
            return Err(bad("per_path_resets is empty"));
        }
        let (mean, _) = mean_std(&self.per_path_resets);
        if !self.mean_resets.is_finite()
            || (self.mean_resets - mean).abs() > 1e-9 * mean.abs().max(1.0)
        {
            return Err(bad("mean_resets does not match per_path_resets"));
        }
        Ok(())
    }
}

/// A layout with its identifier, as stored in a layouts file.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedLayout {
    pub id: String,
    pub layout: Layout,
}

fn layout_seed(seed: u64, n_objects: usize, attempt: u64, index: u64) -> u64 {
    path_seed(seed ^ ((n_objects as u64) << 56) ^ (attempt << 40), index)
}

/// Samples `counts[n]` layouts with `n` objects, ids `g{n}-{index}`, groups in
/// ascending `n`.
pub fn generate_layouts(
    counts: &BTreeMap<usize, usize>,
    seed: u64,
) -> Result<Vec<NamedLayout>, DatasetError> {
    let mut out = Vec::new();
    for (&n, &count) in counts {
        for index in 0..count {
            let layout = sample_with_retries(n, seed, index, |_| Ok(()))?;
            out.push(NamedLayout {
                id: format!("g{n}-{index}"),
                layout,
            });
        }
    }
    Ok(out)
}

fn sample_with_retries(
    n: usize,
    seed: u64,
    index: usize,
    mut accept: impl FnMut(&Layout) -> Result<(), SimError>,
) -> Result<Layout, DatasetError> {
    let mut last = None;
    for attempt in 0..MAX_RESAMPLES {
        match sample_layout(layout_seed(seed, n, attempt, index as u64), n) {
            Ok(layout) => match accept(&layout) {
                Ok(()) => return Ok(layout),
                Err(e @ SimError::InfeasibleLayout { .. }) => {
                    log::warn!("g{n}-{index}: {e}, resampling");
                    last = Some(DatasetError::Sim(e));
                }
                Err(e) => return Err(e.into()),
            },
            Err(e @ LayoutError::Infeasible(_)) => {
                log::warn!("g{n}-{index}: {e}, resampling");
                last = Some(e.into());
            }
            Err(e) => return Err(e.into()),
        }
    }
    Err(last.expect("at least one attempt"))
}

/// Seed handed to `estimate_resets` for the sample at position `index`.
pub fn sample_sim_seed(seed: u64, index: usize) -> u64 {
    path_seed(seed ^ SIM_SALT, index as u64)
}

/// Runs `paths` episodes on every layout. Sample `i` uses the simulation seed
/// derived from `(seed, i)`, so the result depends only on the list and seed.
pub fn simulate_layouts(
    layouts: &[NamedLayout],
    cfg: &SimConfig,
    paths: usize,
    seed: u64,
) -> Result<Vec<Sample>, DatasetError> {
    layouts
        .par_iter()
        .enumerate()
        .map(|(i, named)| {
            let est = estimate_resets(&named.layout, cfg, paths, sample_sim_seed(seed, i))?;
            Ok(Sample::new(named.id.clone(), named.layout.clone(), est.per_path))
        })
        .collect()
}

/// Generation and simulation in one pass. A layout whose free space admits no
/// start position is logged and resampled. Equal to
/// `simulate_layouts(generate_layouts(counts, seed), cfg, paths, seed)`
/// whenever no resampling was needed.
pub fn build_dataset(
    counts: &BTreeMap<usize, usize>,
    cfg: &SimConfig,
    paths: usize,
    seed: u64,
) -> Result<Vec<Sample>, DatasetError> {
    cfg.validate()?;
    let jobs: Vec<(usize, usize)> = counts
        .iter()
        .flat_map(|(&n, &count)| (0..count).map(move |index| (n, index)))
        .collect();
    jobs.par_iter()
        .enumerate()
        .map(|(i, &(n, index))| {
            let mut counts = None;
            let layout = sample_with_retries(n, seed, index, |layout| {
                let est = estimate_resets(layout, cfg, paths, sample_sim_seed(seed, i))?;
                counts = Some(est.per_path);
                Ok(())
            })?;
            Ok(Sample::new(
                format!("g{n}-{index}"),
                layout,
                counts.expect("accepted layouts were simulated"),
            ))
        })
        .collect()
}

/// Default 6:2:2 ratios.
pub const DEFAULT_RATIOS: [f64; 3] = [0.6, 0.2, 0.2];

/// Labels samples train/val/test. Ids are sorted, shuffled by `seed`, and
/// assigned contiguously: `floor(r_val * N)` val, `floor(r_test * N)` test
/// and the remainder train. Labels depend only on the id set and the seed.
pub fn split(samples: &mut [Sample], ratios: [f64; 3], seed: u64) -> Result<(), DatasetError> {
    if ratios.iter().any(|r| !r.is_finite() || *r < 0.0)
        || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(DatasetError::Ratios(ratios));
    }
    let mut ids: Vec<&str> = samples.iter().map(|s| s.id.as_str()).collect();
    ids.sort_unstable();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(DatasetError::DuplicateId(w[0].to_string()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);

    let n = ids.len();
    let n_val = (ratios[1] * n as f64 + 1e-9).floor() as usize;
    let n_test = (ratios[2] * n as f64 + 1e-9).floor() as usize;
    let n_train = n - n_val - n_test;
    let labels: BTreeMap<String, Split> = ids
        .iter()
        .enumerate()
        .map(|(k, id)| {
            let label = if k < n_train {
                Split::Train
            } else if k < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            (id.to_string(), label)
        })
        .collect();
    for s in samples.iter_mut() {
        s.split = labels[&s.id];
    }
    Ok(())
}

/// Mean-reset groups by object count, ascending.
pub fn group_by_count(samples: &[Sample]) -> Vec<(usize, Vec<f64>)> {
    let mut groups: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for s in samples {
        groups.entry(s.object_count()).or_default().push(s.mean_resets);
    }
    groups.into_iter().collect()
}

/// Kruskal-Wallis and Levene across object-count groups.
pub fn analyze(samples: &[Sample]) -> Result<StatsReport, DatasetError> {
    Ok(stats::report(&group_by_count(samples))?)
}
