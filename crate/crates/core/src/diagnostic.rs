//! Random-bipartition diagnostic for covariance homogeneity of a set of
//! partitions, reported as p-values and QQ-plot coordinates.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covtest::{check_epsilon, pair_test_prepared, PreparedPartition, StatKind};
use crate::data::{center_partition, Partition, PartitionedDataset, SampleMatrix};
use crate::error::{Error, Result};
use crate::rng::{self, stage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticParams {
    pub divisions: usize,
    pub trials: usize,
    pub kind: StatKind,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for DiagnosticParams {
    fn default() -> Self {
        Self {
            divisions: 250,
            trials: 200,
            kind: StatKind::Normalized,
            epsilon: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticResult {
    pub pvalues: Vec<f64>,
    /// Partition ids placed in the first group, per division.
    pub divisions: Vec<Vec<usize>>,
    pub params: DiagnosticParams,
}

/// Fair coin per partition, redrawn until both groups are non-empty.
fn bipartition(count: usize, seed: u64, t: usize) -> Vec<bool> {
    let mut rng = rng::stream(seed, &[stage::DIAGNOSTIC_SPLIT, t as u64]);
    loop {
        let side: Vec<bool> = (0..count).map(|_| rng.random_bool(0.5)).collect();
        if side.iter().any(|&s| s) && side.iter().any(|&s| !s) {
            return side;
        }
    }
}

fn pool(parts: &[&Partition]) -> Result<Partition> {
    let centered: Vec<Partition> = parts.iter().map(|p| center_partition(p)).collect();
    let data = SampleMatrix::vstack(centered.iter().map(|p| &p.data))?;
    let mut pooled = Partition::new(0, data);
    pooled.centered = true;
    Ok(pooled)
}

pub fn homogeneity_diagnostic(
    ds: &PartitionedDataset,
    selected: &[usize],
    params: &DiagnosticParams,
) -> Result<DiagnosticResult> {
    if selected.len() < 2 {
        return Err(Error::InvalidParameter(format!(
            "the diagnostic needs at least 2 selected partitions, got {}",
            selected.len()
        )));
    }
    if params.divisions == 0 || params.trials == 0 {
        return Err(Error::InvalidParameter("divisions and trials must be positive".into()));
    }
    check_epsilon(params.epsilon)?;
    let parts = selected
        .iter()
        .map(|&p| {
            ds.partitions().get(p).ok_or_else(|| {
                Error::InvalidParameter(format!("partition {p} out of range 0..{}", ds.r()))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let outcomes = (0..params.divisions)
        .into_par_iter()
        .map(|t| {
            let side = bipartition(parts.len(), params.seed, t);
            let (one, two): (Vec<_>, Vec<_>) = parts.iter().zip(&side).partition(|(_, &s)| s);
            let one: Vec<&Partition> = one.into_iter().map(|(p, _)| *p).collect();
            let two: Vec<&Partition> = two.into_iter().map(|(p, _)| *p).collect();
            let a = PreparedPartition::new(&pool(&one)?)?;
            let b = PreparedPartition::new(&pool(&two)?)?;
            let boot_seed = rng::derive(params.seed, &[stage::DIAGNOSTIC_BOOT, t as u64]);
            let test = pair_test_prepared(&a, &b, params.trials, params.kind, params.epsilon, boot_seed)?;
            let ids = selected.iter().zip(&side).filter(|(_, &s)| s).map(|(&p, _)| p).collect();
            Ok((test.pvalue, ids))
        })
        .collect::<Result<Vec<(f64, Vec<usize>)>>>()?;
    let (pvalues, divisions) = outcomes.into_iter().unzip();
    Ok(DiagnosticResult {
        pvalues,
        divisions,
        params: params.clone(),
    })
}

/// `((k - 0.5) / T, k-th smallest p-value)` for `k = 1..T`.
pub fn qq_points(pvalues: &[f64]) -> Vec<(f64, f64)> {
    let mut sorted = pvalues.to_vec();
    sorted.sort_by(f64::total_cmp);
    let t = sorted.len() as f64;
    sorted
        .into_iter()
        .enumerate()
        .map(|(k, p)| ((k as f64 + 0.5) / t, p))
        .collect()
}

/// Kolmogorov–Smirnov distance between the empirical CDF of `values` and
/// the uniform CDF on [0, 1].
pub fn ks_uniform(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    sorted
        .iter()
        .enumerate()
        .map(|(k, &x)| {
            let x = x.clamp(0.0, 1.0);
            (x - k as f64 / n).max((k as f64 + 1.0) / n - x)
        })
        .fold(0.0, f64::max)
}

/// Asymptotic 1% critical value of the one-sample KS statistic.
pub fn ks_critical_1pct(n: usize) -> f64 {
    1.6276 / (n as f64).sqrt()
}

pub fn write_qq_csv(path: &std::path::Path, points: &[(f64, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    w.write_record(["uniform", "empirical"]).map_err(|e| Error::io(path, e.into()))?;
    for (u, e) in points {
        w.write_record([u.to_string(), e.to_string()]).map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
