//! Simultaneous testing of every pairwise equal-covariance hypothesis with
//! family-wise error control, a Bonferroni baseline, and an accelerated
//! trial-maximum engine for statistics obeying the triangle inequality.
//!
//! Each bootstrap trial draws one multiplier per sample of the whole
//! dataset, so all pairwise bootstrap statistics within a trial share the
//! same Gaussian draws. Multipliers are indexed by global sample position
//! (partitions concatenated in id order).

use std::cmp::Reverse;
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covtest::{
    self, block_max, check_denominators, pair_test_prepared, quantile_rank, MultiplierSet,
    PreparedPartition, StatKind,
};
use crate::data::PartitionedDataset;
use crate::error::{Error, Result};
use crate::gram::{self, packed_range, row_blocks};
use crate::rng::{self, stage};

pub type Pair = (usize, usize);

/// Ordered list of partition pairs `(i, j)`, `i < j`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HypothesisList {
    pub pairs: Vec<Pair>,
}

impl HypothesisList {
    /// All `r(r-1)/2` pairs in ascending order.
    pub fn all(r: usize) -> Self {
        let pairs = (0..r)
            .flat_map(|i| (i + 1..r).map(move |j| (i, j)))
            .collect();
        Self { pairs }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn contains(&self, pair: Pair) -> bool {
        self.pairs.binary_search(&pair).is_ok()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Engine {
    Naive,
    Accelerated,
}

impl fmt::Display for Engine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Engine::Naive => "naive",
            Engine::Accelerated => "accelerated",
        })
    }
}

impl FromStr for Engine {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive" => Ok(Engine::Naive),
            "accelerated" => Ok(Engine::Accelerated),
            other => Err(Error::Config(format!(
                "unknown engine {other:?} (expected naive or accelerated)"
            ))),
        }
    }
}

/// Whether bootstrap trial `b` reuses the same multipliers at every step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MultiplierSchedule {
    /// Trial `b` uses the stream `(seed, b)` at every step.
    Shared,
    /// Trial `b` of step `t` uses the stream `(derive(seed, fresh, t), b)`.
    FreshPerStep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepdownConfig {
    pub alpha: f64,
    pub trials: usize,
    pub kind: StatKind,
    pub epsilon: f64,
    pub seed: u64,
    pub engine: Engine,
    pub schedule: MultiplierSchedule,
    /// Rows of the bootstrap covariance materialized at once per partition.
    pub block_width: usize,
}

impl Default for StepdownConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            trials: 200,
            kind: StatKind::Normalized,
            epsilon: 0.0,
            seed: 0,
            engine: Engine::Naive,
            schedule: MultiplierSchedule::Shared,
            block_width: 512,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub pair: Pair,
    /// 1-based step at which the pair was removed.
    pub step: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairStatistic {
    pub pair: Pair,
    pub value: f64,
}

/// Work done by the accelerated engine for one trial (or summed over trials).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AcceleratedTrace {
    pub computed_count: usize,
    pub skipped_count: usize,
}

impl std::ops::AddAssign for AcceleratedTrace {
    fn add_assign(&mut self, rhs: Self) {
        self.computed_count += rhs.computed_count;
        self.skipped_count += rhs.skipped_count;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepdownResult {
    pub r: usize,
    pub alpha: f64,
    pub trials: usize,
    pub kind: StatKind,
    pub epsilon: f64,
    pub engine: Engine,
    pub seed: u64,
    pub steps: usize,
    pub accepted: HypothesisList,
    pub rejected: Vec<Rejection>,
    pub statistics: Vec<PairStatistic>,
    /// `(1 - alpha)` bootstrap quantile of the trial maxima, per step.
    pub quantile_trace: Vec<f64>,
    /// Per-step accelerated-engine work summed over trials; empty for the naive engine.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub acceleration: Vec<AcceleratedTrace>,
    /// Trial maxima per step.
    #[serde(skip)]
    pub trial_maxima: Vec<Vec<f64>>,
}

impl StepdownResult {
    pub fn statistic(&self, pair: Pair) -> Option<f64> {
        self.statistics
            .binary_search_by_key(&pair, |s| s.pair)
            .ok()
            .map(|k| self.statistics[k].value)
    }
}

/// Centered partitions with cached statistics and global sample offsets.
#[derive(Debug, Clone)]
pub struct PreparedDataset {
    pub parts: Vec<PreparedPartition>,
    pub offsets: Vec<usize>,
    pub total: usize,
    pub d: usize,
}

impl PreparedDataset {
    pub fn new(ds: &PartitionedDataset) -> Result<Self> {
        let parts = ds
            .partitions()
            .iter()
            .map(PreparedPartition::new)
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            parts,
            offsets: ds.sample_offsets(),
            total: ds.total_samples(),
            d: ds.d(),
        })
    }

    pub fn r(&self) -> usize {
        self.parts.len()
    }

    fn multipliers_of<'a>(&self, p: usize, g: &'a [f64]) -> &'a [f64] {
        &g[self.offsets[p]..self.offsets[p] + self.parts[p].n()]
    }

    fn pair_statistic(&self, cache: &[Vec<f64>], (p, q): Pair, kind: StatKind) -> f64 {
        block_max(
            kind,
            &cache[p],
            &cache[q],
            &self.parts[p].scaled_var,
            &self.parts[q].scaled_var,
        )
    }
}

/// Each partition's bootstrap covariance for one trial, computed once and
/// shared by every pair containing it.
#[derive(Debug, Clone)]
pub struct BootstrapCache {
    d: usize,
    packed: Vec<Vec<f64>>,
}

impl BootstrapCache {
    pub fn matrix(&self, p: usize) -> DMatrix<f64> {
        gram::unpack(self.d, &self.packed[p])
    }

    pub fn len(&self) -> usize {
        self.packed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.packed.is_empty()
    }
}

pub fn per_partition_bootstrap_cache(
    ds: &PreparedDataset,
    mult: &MultiplierSet,
) -> Result<BootstrapCache> {
    if mult.len() != ds.total {
        return Err(Error::DimensionMismatch(format!(
            "{} multipliers for {} samples",
            mult.len(),
            ds.total
        )));
    }
    let packed = (0..ds.r())
        .map(|p| ds.parts[p].bootstrap_full(ds.multipliers_of(p, &mult.g)))
        .collect();
    Ok(BootstrapCache { d: ds.d, packed })
}

impl BootstrapCache {
    /// Bootstrap statistic of pair `(p, q)` assembled from the cache.
    pub fn pair_statistic(&self, ds: &PreparedDataset, pair: Pair, kind: StatKind) -> f64 {
        ds.pair_statistic(&self.packed, pair, kind)
    }
}

/// Per-pair bootstrap statistics for one trial, materializing the
/// per-partition bootstrap covariances in row blocks of `block_width`.
fn trial_pair_statistics(
    ds: &PreparedDataset,
    g: &[f64],
    pairs: &[Pair],
    kind: StatKind,
    block_width: usize,
) -> Vec<f64> {
    let d = ds.d;
    let mut involved = vec![false; ds.r()];
    for &(p, q) in pairs {
        involved[p] = true;
        involved[q] = true;
    }
    let mut maxima = vec![0.0f64; pairs.len()];
    let mut buffers: Vec<Vec<f64>> = vec![Vec::new(); ds.r()];
    for rows in row_blocks(d, block_width) {
        let range = packed_range(d, &rows);
        for p in (0..ds.r()).filter(|&p| involved[p]) {
            let buf = &mut buffers[p];
            buf.resize(range.len(), 0.0);
            ds.parts[p].bootstrap_rows(ds.multipliers_of(p, g), rows.clone(), buf);
        }
        for (m, &(p, q)) in maxima.iter_mut().zip(pairs) {
            let v = block_max(
                kind,
                &buffers[p],
                &buffers[q],
                &ds.parts[p].scaled_var[range.clone()],
                &ds.parts[q].scaled_var[range.clone()],
            );
            *m = m.max(v);
        }
    }
    maxima
}

/// Maximum bootstrap statistic over `remaining` for one trial, computed
/// with a shortest-path bound so that pairs whose triangle-inequality bound
/// cannot exceed the running maximum are never evaluated.
///
/// Requires [`StatKind::MaxAbsDiff`]. The returned maximum is bit-identical
/// to the maximum over all pairs.
pub fn trial_max_accelerated(
    ds: &PreparedDataset,
    remaining: &HypothesisList,
    mult: &MultiplierSet,
) -> Result<(f64, AcceleratedTrace)> {
    if mult.len() != ds.total {
        return Err(Error::DimensionMismatch(format!(
            "{} multipliers for {} samples",
            mult.len(),
            ds.total
        )));
    }
    Ok(accelerated_max(ds, &remaining.pairs, &mult.g))
}

// Relative slack on path bounds; covers rounding in the summed edge weights.
const BOUND_SLACK: f64 = 1e-10;

fn accelerated_max(ds: &PreparedDataset, pairs: &[Pair], g: &[f64]) -> (f64, AcceleratedTrace) {
    let r = ds.r();
    let mut trace = AcceleratedTrace::default();
    if pairs.is_empty() {
        return (0.0, trace);
    }
    let mut cache: Vec<Option<Vec<f64>>> = vec![None; r];
    let stat = |p: usize, q: usize, cache: &mut Vec<Option<Vec<f64>>>| -> f64 {
        for v in [p, q] {
            if cache[v].is_none() {
                cache[v] = Some(ds.parts[v].bootstrap_full(ds.multipliers_of(v, g)));
            }
        }
        block_max(
            StatKind::MaxAbsDiff,
            cache[p].as_deref().unwrap(),
            cache[q].as_deref().unwrap(),
            &[],
            &[],
        )
    };

    let mut adj = vec![Vec::new(); r];
    for &(p, q) in pairs {
        adj[p].push(q);
        adj[q].push(p);
    }
    adj.iter_mut().for_each(|a| a.sort_unstable());

    // spanning forest: BFS from the largest partition of each component
    let mut order: Vec<usize> = (0..r).filter(|&v| !adj[v].is_empty()).collect();
    order.sort_by_key(|&v| (Reverse(ds.parts[v].n()), v));
    let mut seen = vec![false; r];
    let mut tree = Vec::new();
    for &root in &order {
        if seen[root] {
            continue;
        }
        seen[root] = true;
        let mut queue = std::collections::VecDeque::from([root]);
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    tree.push((u.min(v), u.max(v)));
                    queue.push_back(v);
                }
            }
        }
    }
    tree.sort_unstable();

    let mut weight = vec![f64::INFINITY; r * r];
    let mut z = 0.0f64;
    for &(p, q) in &tree {
        let v = stat(p, q, &mut cache);
        weight[p * r + q] = v;
        weight[q * r + p] = v;
        z = z.max(v);
        trace.computed_count += 1;
    }

    let mut dist = vec![0.0; r];
    let mut done = vec![false; r];
    for &(p, q) in pairs {
        if tree.binary_search(&(p, q)).is_ok() {
            continue;
        }
        let bound = shortest_path(&weight, r, p, q, &mut dist, &mut done);
        if bound * (1.0 + BOUND_SLACK) > z {
            let v = stat(p, q, &mut cache);
            weight[p * r + q] = v;
            weight[q * r + p] = v;
            z = z.max(v);
            trace.computed_count += 1;
        } else {
            trace.skipped_count += 1;
        }
    }
    (z, trace)
}

/// Dense Dijkstra from `src`, stopping once `dst` is settled.
fn shortest_path(w: &[f64], r: usize, src: usize, dst: usize, dist: &mut [f64], done: &mut [bool]) -> f64 {
    dist.iter_mut().for_each(|x| *x = f64::INFINITY);
    done.iter_mut().for_each(|x| *x = false);
    dist[src] = 0.0;
    loop {
        let mut u = usize::MAX;
        let mut best = f64::INFINITY;
        for v in 0..r {
            if !done[v] && dist[v] < best {
                best = dist[v];
                u = v;
            }
        }
        if u == usize::MAX || u == dst {
            return dist[dst];
        }
        done[u] = true;
        for v in 0..r {
            let e = w[u * r + v];
            if !done[v] && e.is_finite() && best + e < dist[v] {
                dist[v] = best + e;
            }
        }
    }
}

/// `(1 - alpha)` empirical quantile at rank `ceil((1 - alpha) B)`; rank 0
/// (alpha = 1) yields 0, the lower bound of the statistics.
pub fn bootstrap_quantile(maxima: &[f64], alpha: f64) -> f64 {
    let k = quantile_rank(alpha, maxima.len());
    if k == 0 {
        return 0.0;
    }
    let mut sorted = maxima.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted[k - 1]
}

fn check_config(r: usize, cfg: &StepdownConfig) -> Result<()> {
    if r < 2 {
        return Err(Error::InvalidParameter(format!("stepdown needs at least 2 partitions, got {r}")));
    }
    if cfg.trials == 0 {
        return Err(Error::InvalidParameter("at least one bootstrap trial is required".into()));
    }
    check_alpha(cfg.alpha)?;
    covtest::check_epsilon(cfg.epsilon)?;
    if cfg.engine == Engine::Accelerated {
        if cfg.kind != StatKind::MaxAbsDiff {
            return Err(Error::InvalidParameter(
                "the accelerated engine requires the maxabs statistic".into(),
            ));
        }
        if cfg.epsilon != 0.0 {
            return Err(Error::InvalidParameter(
                "the accelerated engine does not support epsilon > 0".into(),
            ));
        }
    }
    Ok(())
}

fn check_alpha(alpha: f64) -> Result<()> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("alpha must lie in [0, 1], got {alpha}")))
    }
}

/// Stepdown procedure over one dataset. Observed statistics are computed
/// once; with shared multipliers and the naive engine the per-pair
/// bootstrap table is also computed once and reused by every step and by
/// every alpha passed to [`StepdownRunner::run`].
pub struct StepdownRunner {
    ds: PreparedDataset,
    cfg: StepdownConfig,
    pairs: Vec<Pair>,
    observed: Vec<f64>,
    table: OnceLock<Vec<Vec<f64>>>,
}

impl StepdownRunner {
    pub fn new(ds: &PartitionedDataset, cfg: &StepdownConfig) -> Result<Self> {
        check_config(ds.r(), cfg)?;
        Self::from_prepared(PreparedDataset::new(ds)?, cfg)
    }

    pub fn from_prepared(ds: PreparedDataset, cfg: &StepdownConfig) -> Result<Self> {
        check_config(ds.r(), cfg)?;
        let pairs = HypothesisList::all(ds.r()).pairs;
        let observed = pairs
            .iter()
            .map(|&(p, q)| {
                check_denominators(cfg.kind, &ds.parts[p], &ds.parts[q])?;
                covtest::test_statistic(&ds.parts[p].stats, &ds.parts[q].stats, cfg.kind, cfg.epsilon)
                    .map(|t| t.value)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            ds,
            cfg: cfg.clone(),
            pairs,
            observed,
            table: OnceLock::new(),
        })
    }

    pub fn prepared(&self) -> &PreparedDataset {
        &self.ds
    }

    fn compute_table(&self, seed: u64, pairs: &[Pair]) -> Vec<Vec<f64>> {
        (0..self.cfg.trials)
            .into_par_iter()
            .map(|b| {
                let mult = MultiplierSet::draw(seed, b, self.ds.total);
                trial_pair_statistics(&self.ds, &mult.g, pairs, self.cfg.kind, self.cfg.block_width)
            })
            .collect()
    }

    fn step_seed(&self, step: usize) -> u64 {
        match self.cfg.schedule {
            MultiplierSchedule::Shared => self.cfg.seed,
            MultiplierSchedule::FreshPerStep => {
                rng::derive(self.cfg.seed, &[stage::FRESH_STEP, step as u64])
            }
        }
    }

    /// Trial maxima over the pairs with indices `live` (into the full pair list).
    fn trial_maxima(&self, step: usize, live: &[usize]) -> (Vec<f64>, Option<AcceleratedTrace>) {
        let seed = self.step_seed(step);
        match (self.cfg.engine, self.cfg.schedule) {
            (Engine::Accelerated, _) => {
                let pairs: Vec<Pair> = live.iter().map(|&k| self.pairs[k]).collect();
                let per_trial: Vec<(f64, AcceleratedTrace)> = (0..self.cfg.trials)
                    .into_par_iter()
                    .map(|b| {
                        let mult = MultiplierSet::draw(seed, b, self.ds.total);
                        accelerated_max(&self.ds, &pairs, &mult.g)
                    })
                    .collect();
                let mut total = AcceleratedTrace::default();
                let maxima = per_trial
                    .into_iter()
                    .map(|(m, t)| {
                        total += t;
                        m
                    })
                    .collect();
                (maxima, Some(total))
            }
            (Engine::Naive, MultiplierSchedule::Shared) => {
                let table = self.table.get_or_init(|| self.compute_table(seed, &self.pairs));
                let maxima = table
                    .iter()
                    .map(|row| live.iter().fold(0.0f64, |acc, &k| acc.max(row[k])))
                    .collect();
                (maxima, None)
            }
            (Engine::Naive, MultiplierSchedule::FreshPerStep) => {
                let pairs: Vec<Pair> = live.iter().map(|&k| self.pairs[k]).collect();
                let table = self.compute_table(seed, &pairs);
                let maxima = table
                    .iter()
                    .map(|row| row.iter().fold(0.0f64, |acc, &v| acc.max(v)))
                    .collect();
                (maxima, None)
            }
        }
    }

    pub fn run(&self, alpha: f64) -> Result<StepdownResult> {
        check_alpha(alpha)?;
        let mut live: Vec<usize> = (0..self.pairs.len()).collect();
        let mut rejected = Vec::new();
        let mut quantile_trace = Vec::new();
        let mut acceleration = Vec::new();
        let mut trial_maxima = Vec::new();
        let mut step = 0;
        while !live.is_empty() {
            step += 1;
            let (maxima, trace) = self.trial_maxima(step, &live);
            let q = bootstrap_quantile(&maxima, alpha);
            quantile_trace.push(q);
            trial_maxima.push(maxima);
            acceleration.extend(trace);
            let before = live.len();
            live.retain(|&k| {
                if self.observed[k] >= q {
                    rejected.push(Rejection {
                        pair: self.pairs[k],
                        step,
                    });
                    false
                } else {
                    true
                }
            });
            if live.len() == before {
                break;
            }
        }
        Ok(StepdownResult {
            r: self.ds.r(),
            alpha,
            trials: self.cfg.trials,
            kind: self.cfg.kind,
            epsilon: self.cfg.epsilon,
            engine: self.cfg.engine,
            seed: self.cfg.seed,
            steps: step,
            accepted: HypothesisList {
                pairs: live.iter().map(|&k| self.pairs[k]).collect(),
            },
            rejected,
            statistics: self
                .pairs
                .iter()
                .zip(&self.observed)
                .map(|(&pair, &value)| PairStatistic { pair, value })
                .collect(),
            quantile_trace,
            acceleration,
            trial_maxima,
        })
    }
}

pub fn stepdown(ds: &PartitionedDataset, cfg: &StepdownConfig) -> Result<StepdownResult> {
    StepdownRunner::new(ds, cfg)?.run(cfg.alpha)
}

/// Independent pairwise p-values, pair `(i, j)` seeded from `(seed, i, j)`.
pub fn bonferroni_pvalues(
    ds: &PreparedDataset,
    trials: usize,
    kind: StatKind,
    epsilon: f64,
    seed: u64,
) -> Result<Vec<(Pair, f64)>> {
    HypothesisList::all(ds.r())
        .pairs
        .into_iter()
        .map(|(p, q)| {
            let pair_seed = rng::derive(seed, &[stage::BONFERRONI, p as u64, q as u64]);
            pair_test_prepared(&ds.parts[p], &ds.parts[q], trials, kind, epsilon, pair_seed)
                .map(|t| ((p, q), t.pvalue))
        })
        .collect()
}

/// Pairs whose p-value is at least `alpha / |pairs|`.
pub fn bonferroni_accept(pvalues: &[(Pair, f64)], alpha: f64) -> HypothesisList {
    let cutoff = alpha / pvalues.len().max(1) as f64;
    HypothesisList {
        pairs: pvalues
            .iter()
            .filter(|(_, p)| *p >= cutoff)
            .map(|(pair, _)| *pair)
            .collect(),
    }
}

pub fn bonferroni(
    ds: &PartitionedDataset,
    alpha: f64,
    trials: usize,
    kind: StatKind,
    epsilon: f64,
    seed: u64,
) -> Result<HypothesisList> {
    if ds.r() < 2 {
        return Err(Error::InvalidParameter(format!("need at least 2 partitions, got {}", ds.r())));
    }
    check_alpha(alpha)?;
    let prep = PreparedDataset::new(ds)?;
    Ok(bonferroni_accept(&bonferroni_pvalues(&prep, trials, kind, epsilon, seed)?, alpha))
}
