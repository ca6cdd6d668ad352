//! Group comparison statistics: Kruskal-Wallis H with tie correction and
//! mean-centered Levene W.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, FisherSnedecor};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("need at least 2 groups, got {0}")]
    TooFewGroups(usize),
    #[error("group {index} has {len} values, need at least {min}")]
    GroupTooSmall { index: usize, len: usize, min: usize },
    #[error("group {0} contains a non-finite value")]
    NonFinite(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KruskalWallis {
    pub h: f64,
    pub p: f64,
    pub eta2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Levene {
    pub stat: f64,
    pub p: f64,
}

fn check_groups(groups: &[Vec<f64>], min_len: usize) -> Result<(), StatsError> {
    if groups.len() < 2 {
        return Err(StatsError::TooFewGroups(groups.len()));
    }
    for (index, g) in groups.iter().enumerate() {
        if g.len() < min_len {
            return Err(StatsError::GroupTooSmall {
                index,
                len: g.len(),
                min: min_len,
            });
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(StatsError::NonFinite(index));
        }
    }
    Ok(())
}

/// Midranks (1-based) of `values`, plus the tie term `sum(t^3 - t)`.
fn midranks(values: &[f64]) -> (Vec<f64>, f64) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut ties = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        let t = (j - i + 1) as f64;
        ties += t * t * t - t;
        i = j + 1;
    }
    (ranks, ties)
}

/// Kruskal-Wallis H test. `p` is the chi-square (k - 1 df) upper tail and
/// `eta2 = (H - k + 1) / (N - k)`. When every value is tied, H is 0 and p 1.
pub fn kruskal_wallis(groups: &[Vec<f64>]) -> Result<KruskalWallis, StatsError> {
    check_groups(groups, 1)?;
    let k = groups.len() as f64;
    let all: Vec<f64> = groups.iter().flatten().copied().collect();
    let n = all.len() as f64;
    let (ranks, ties) = midranks(&all);

    let mut offset = 0;
    let mut sum = 0.0;
    for g in groups {
        let r: f64 = ranks[offset..offset + g.len()].iter().sum();
        sum += r * r / g.len() as f64;
        offset += g.len();
    }
    let h_raw = 12.0 / (n * (n + 1.0)) * sum - 3.0 * (n + 1.0);
    let correction = 1.0 - ties / (n * n * n - n);
    let h = if correction > 0.0 {
        (h_raw / correction).max(0.0)
    } else {
        0.0
    };
    let p = if h == 0.0 {
        1.0
    } else {
        let chi2 = ChiSquared::new(k - 1.0).expect("k >= 2");
        chi2.sf(h).clamp(0.0, 1.0)
    };
    let eta2 = if n > k { (h - k + 1.0) / (n - k) } else { f64::NAN };
    Ok(KruskalWallis { h, p, eta2 })
}

/// Levene's test with group means as centers. When all absolute deviations
/// are equal within every group the within-group sum of squares is 0: the
/// result is (0, 1) if the groups also agree, (inf, 0) otherwise.
pub fn levene(groups: &[Vec<f64>]) -> Result<Levene, StatsError> {
    check_groups(groups, 2)?;
    let k = groups.len();
    let z: Vec<Vec<f64>> = groups
        .iter()
        .map(|g| {
            let mean = g.iter().sum::<f64>() / g.len() as f64;
            g.iter().map(|v| (v - mean).abs()).collect()
        })
        .collect();
    let n: usize = z.iter().map(Vec::len).sum();
    let group_means: Vec<f64> = z
        .iter()
        .map(|g| g.iter().sum::<f64>() / g.len() as f64)
        .collect();
    let grand = z.iter().flatten().sum::<f64>() / n as f64;

    let between: f64 = z
        .iter()
        .zip(&group_means)
        .map(|(g, m)| g.len() as f64 * (m - grand).powi(2))
        .sum();
    let within: f64 = z
        .iter()
        .zip(&group_means)
        .map(|(g, m)| g.iter().map(|v| (v - m).powi(2)).sum::<f64>())
        .sum();

    let df1 = (k - 1) as f64;
    let df2 = (n - k) as f64;
    if within == 0.0 {
        return Ok(if between == 0.0 {
            Levene { stat: 0.0, p: 1.0 }
        } else {
            Levene {
                stat: f64::INFINITY,
                p: 0.0,
            }
        });
    }
    let stat = (between / df1) / (within / df2);
    let f = FisherSnedecor::new(df1, df2).expect("positive degrees of freedom");
    Ok(Levene {
        stat,
        p: f.sf(stat).clamp(0.0, 1.0),
    })
}

/// Per-group summary and both tests, for samples grouped by object count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub group_labels: Vec<usize>,
    pub group_sizes: Vec<usize>,
    pub group_means: Vec<f64>,
    pub group_sds: Vec<f64>,
    pub kw_h: f64,
    pub kw_p: f64,
    pub kw_eta2: f64,
    pub levene_stat: f64,
    pub levene_p: f64,
}

/// Builds the report from labelled groups (labels in ascending order).
pub fn report(groups: &[(usize, Vec<f64>)]) -> Result<StatsReport, StatsError> {
    let values: Vec<Vec<f64>> = groups.iter().map(|(_, g)| g.clone()).collect();
    let kw = kruskal_wallis(&values)?;
    let lev = levene(&values)?;
    let (means, sds) = values
        .iter()
        .map(|g| {
            let n = g.len() as f64;
            let mean = g.iter().sum::<f64>() / n;
            let var = g.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (mean, var.sqrt())
        })
        .unzip();
    Ok(StatsReport {
        group_labels: groups.iter().map(|(l, _)| *l).collect(),
        group_sizes: values.iter().map(Vec::len).collect(),
        group_means: means,
        group_sds: sds,
        kw_h: kw.h,
        kw_p: kw.p,
        kw_eta2: kw.eta2,
        levene_stat: lev.stat,
        levene_p: lev.p,
    })
}
