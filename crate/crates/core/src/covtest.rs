//! Two-sample test for equal covariance matrices: the max-type statistic,
//! its multiplier-bootstrap counterpart and the bootstrap p-value.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{center_partition, partition_stats, Partition, PartitionStats};
use crate::error::{Error, Result};
use crate::gram::{self, packed_cell, packed_range};
use crate::rng;

/// Which cell-wise discrepancy the max statistic is built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StatKind {
    /// `(sigma_x - sigma_y)^2 / (s_x/n_x + s_y/n_y)`.
    Normalized,
    /// `|sigma_x - sigma_y|`; satisfies the triangle inequality across partitions.
    #[serde(rename = "maxabs")]
    MaxAbsDiff,
}

impl fmt::Display for StatKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StatKind::Normalized => "normalized",
            StatKind::MaxAbsDiff => "maxabs",
        })
    }
}

impl FromStr for StatKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normalized" => Ok(StatKind::Normalized),
            "maxabs" => Ok(StatKind::MaxAbsDiff),
            other => Err(Error::Config(format!(
                "unknown statistic {other:?} (expected normalized or maxabs)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestStatistic {
    pub value: f64,
    /// Cell `(i, j)`, `i <= j`, holding the largest cell statistic.
    pub argmax_index: (usize, usize),
    pub epsilon: f64,
}

/// Gaussian multipliers for one bootstrap trial, one per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiplierSet {
    pub g: Vec<f64>,
    pub trial_index: usize,
    pub seed: u64,
}

impl MultiplierSet {
    /// Draws `len` multipliers for trial `trial` of the stream rooted at `seed`.
    pub fn draw(seed: u64, trial: usize, len: usize) -> Self {
        let g = rng::gaussian_vec(&mut rng::stream(seed, &[trial as u64]), len);
        Self {
            g,
            trial_index: trial,
            seed,
        }
    }

    pub fn len(&self) -> usize {
        self.g.len()
    }

    pub fn is_empty(&self) -> bool {
        self.g.is_empty()
    }
}

pub(crate) fn check_epsilon(epsilon: f64) -> Result<()> {
    if (0.0..0.5).contains(&epsilon) {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("epsilon must lie in [0, 0.5), got {epsilon}")))
    }
}

/// A centered partition with its statistics and `s/n` denominators cached.
#[derive(Debug, Clone)]
pub struct PreparedPartition {
    pub partition: Partition,
    pub stats: PartitionStats,
    pub(crate) scaled_var: Vec<f64>,
}

impl PreparedPartition {
    pub fn new(p: &Partition) -> Result<Self> {
        let partition = center_partition(p);
        let stats = partition_stats(&partition)?;
        Ok(Self::from_parts(partition, stats))
    }

    pub fn from_parts(partition: Partition, stats: PartitionStats) -> Self {
        let n = stats.n as f64;
        let scaled_var = stats.s_packed().iter().map(|s| s / n).collect();
        Self {
            partition,
            stats,
            scaled_var,
        }
    }

    pub fn n(&self) -> usize {
        self.stats.n
    }

    pub fn d(&self) -> usize {
        self.stats.d
    }

    /// Bootstrap covariance rows `sum_m g_m (x_mi x_mj - sigma_ij) / n` for
    /// the given block of rows, evaluated as `G/n - sigma * (sum g)/n` so
    /// that unit multipliers give exactly zero.
    pub(crate) fn bootstrap_rows(&self, g: &[f64], rows: Range<usize>, out: &mut [f64]) {
        let d = self.d();
        let range = packed_range(d, &rows);
        gram::weighted_gram_rows(&self.partition.data, Some(g), rows, out);
        let n = self.n() as f64;
        let gbar = g.iter().sum::<f64>() / n;
        for (o, sig) in out.iter_mut().zip(&self.stats.sigma_packed()[range]) {
            *o = *o / n - sig * gbar;
        }
    }

    pub(crate) fn bootstrap_full(&self, g: &[f64]) -> Vec<f64> {
        let d = self.d();
        let mut out = vec![0.0; gram::packed_len(d)];
        self.bootstrap_rows(g, 0..d, &mut out);
        out
    }
}

/// Errors on the first cell whose normalized-statistic denominator vanishes.
pub(crate) fn check_denominators(kind: StatKind, a: &PreparedPartition, b: &PreparedPartition) -> Result<()> {
    if kind == StatKind::MaxAbsDiff {
        return Ok(());
    }
    match a
        .scaled_var
        .iter()
        .zip(&b.scaled_var)
        .position(|(u, v)| u + v == 0.0)
    {
        Some(k) => {
            let (i, j) = packed_cell(a.d(), k);
            Err(Error::DegenerateVariance { i, j })
        }
        None => Ok(()),
    }
}

/// Largest cell statistic between two packed difference sources over the
/// packed index range `range`.
#[inline]
pub(crate) fn block_max(
    kind: StatKind,
    x: &[f64],
    y: &[f64],
    ux: &[f64],
    uy: &[f64],
) -> f64 {
    match kind {
        StatKind::Normalized => x
            .iter()
            .zip(y)
            .zip(ux.iter().zip(uy))
            .fold(0.0f64, |acc, ((a, b), (u, v))| {
                let diff = a - b;
                acc.max(diff * diff / (u + v))
            }),
        StatKind::MaxAbsDiff => x
            .iter()
            .zip(y)
            .fold(0.0f64, |acc, (a, b)| acc.max((a - b).abs())),
    }
}

fn cell_values(kind: StatKind, a: &PartitionStats, b: &PartitionStats) -> Vec<f64> {
    let (sa, sb) = (a.sigma_packed(), b.sigma_packed());
    match kind {
        StatKind::Normalized => {
            let (na, nb) = (a.n as f64, b.n as f64);
            sa.iter()
                .zip(sb)
                .zip(a.s_packed().iter().zip(b.s_packed()))
                .map(|((x, y), (u, v))| (x - y).powi(2) / (u / na + v / nb))
                .collect()
        }
        StatKind::MaxAbsDiff => sa.iter().zip(sb).map(|(x, y)| (x - y).abs()).collect(),
    }
}

/// Position (1-based) of the `(1 - q)` empirical quantile among `count`
/// sorted values: `ceil((1 - q) * count)`, clamped to `0..=count`.
pub(crate) fn quantile_rank(q: f64, count: usize) -> usize {
    let raw = (1.0 - q) * count as f64;
    // guard against representation error pushing an integer product upward
    let k = (raw - 1e-9).ceil().max(0.0) as usize;
    k.min(count)
}

/// The observed statistic. With `epsilon = 0` it is the maximum cell
/// statistic; otherwise the order statistic at rank `ceil((1 - eps) d^2)`
/// of all `d^2` cell values.
pub fn test_statistic(
    a: &PartitionStats,
    b: &PartitionStats,
    kind: StatKind,
    epsilon: f64,
) -> Result<TestStatistic> {
    if a.d != b.d {
        return Err(Error::DimensionMismatch(format!("{} vs {} variables", a.d, b.d)));
    }
    check_epsilon(epsilon)?;
    let d = a.d;
    if kind == StatKind::Normalized {
        let (na, nb) = (a.n as f64, b.n as f64);
        if let Some(k) = a
            .s_packed()
            .iter()
            .zip(b.s_packed())
            .position(|(u, v)| u / na + v / nb == 0.0)
        {
            let (i, j) = packed_cell(d, k);
            return Err(Error::DegenerateVariance { i, j });
        }
    }
    let cells = cell_values(kind, a, b);
    let (kmax, max) = cells
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bk, bv), (k, &v)| if v > bv { (k, v) } else { (bk, bv) });
    let value = if epsilon == 0.0 {
        max
    } else {
        let mut full = Vec::with_capacity(d * d);
        for (k, &v) in cells.iter().enumerate() {
            let (i, j) = packed_cell(d, k);
            full.push(v);
            if i != j {
                full.push(v);
            }
        }
        full.sort_by(f64::total_cmp);
        full[quantile_rank(epsilon, full.len()).max(1) - 1]
    };
    Ok(TestStatistic {
        value,
        argmax_index: packed_cell(d, kmax),
        epsilon,
    })
}

/// Bootstrap statistic for one trial: multipliers `g[..n_a]` weight the
/// first partition and `g[n_a..]` the second. Always the full max; the
/// robustness quantile applies only to the observed statistic.
pub fn bootstrap_statistic(
    a: &PreparedPartition,
    b: &PreparedPartition,
    mult: &MultiplierSet,
    kind: StatKind,
) -> Result<f64> {
    if mult.len() != a.n() + b.n() {
        return Err(Error::DimensionMismatch(format!(
            "{} multipliers for {} + {} samples",
            mult.len(),
            a.n(),
            b.n()
        )));
    }
    if a.d() != b.d() {
        return Err(Error::DimensionMismatch(format!("{} vs {} variables", a.d(), b.d())));
    }
    check_denominators(kind, a, b)?;
    Ok(bootstrap_max_unchecked(a, b, &mult.g, kind))
}

fn bootstrap_max_unchecked(a: &PreparedPartition, b: &PreparedPartition, g: &[f64], kind: StatKind) -> f64 {
    let (ga, gb) = g.split_at(a.n());
    let x = a.bootstrap_full(ga);
    let y = b.bootstrap_full(gb);
    block_max(kind, &x, &y, &a.scaled_var, &b.scaled_var)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairTest {
    pub statistic: TestStatistic,
    pub pvalue: f64,
    pub trials: usize,
}

/// Bootstrap p-value `|{b : T_b >= T}| / B`. Trial `b` draws its
/// multipliers from the stream `(seed, b)`.
pub fn pair_test(
    a: &Partition,
    b: &Partition,
    trials: usize,
    kind: StatKind,
    epsilon: f64,
    seed: u64,
) -> Result<PairTest> {
    let pa = PreparedPartition::new(a)?;
    let pb = PreparedPartition::new(b)?;
    pair_test_prepared(&pa, &pb, trials, kind, epsilon, seed)
}

pub fn pair_pvalue(
    a: &Partition,
    b: &Partition,
    trials: usize,
    kind: StatKind,
    epsilon: f64,
    seed: u64,
) -> Result<f64> {
    pair_test(a, b, trials, kind, epsilon, seed).map(|t| t.pvalue)
}

pub fn pair_test_prepared(
    a: &PreparedPartition,
    b: &PreparedPartition,
    trials: usize,
    kind: StatKind,
    epsilon: f64,
    seed: u64,
) -> Result<PairTest> {
    if trials == 0 {
        return Err(Error::InvalidParameter("at least one bootstrap trial is required".into()));
    }
    let statistic = test_statistic(&a.stats, &b.stats, kind, epsilon)?;
    check_denominators(kind, a, b)?;
    let total = a.n() + b.n();
    let exceed = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mult = MultiplierSet::draw(seed, t, total);
            bootstrap_max_unchecked(a, b, &mult.g, kind).abs() >= statistic.value.abs()
        })
        .filter(|&hit| hit)
        .count();
    Ok(PairTest {
        statistic,
        pvalue: exceed as f64 / trials as f64,
        trials,
    })
}
