//! Selection metrics and simulation studies: hypothesis- and
//! partition-level rates, spectral error of pooled covariance estimates,
//! ROC sweeps over (β, α) and the four-method estimation comparison.
//!
//! Group 1 is partitions `0..r1`, group 2 the next `r2`, group 3 the rest.

use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::covtest::StatKind;
use crate::data::{center_partition, PartitionedDataset};
use crate::error::{Error, Result};
use crate::quasiclique::{build_graph, largest_quasi_clique, QuasiCliqueParams};
use crate::rng::{self, stage};
use crate::simgen::{reference_covariance, sample_dataset, Construction, SimSpec};
use crate::stepdown::{
    bonferroni_accept, bonferroni_pvalues, HypothesisList, PreparedDataset, StepdownConfig,
    StepdownRunner,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RateLevel {
    Hypothesis,
    Partition,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub tpr: f64,
    pub fpr: f64,
    pub level: RateLevel,
}

fn choose2(k: usize) -> usize {
    k * k.saturating_sub(1) / 2
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// TPR over within-group-1 pairs and FPR over all other pairs.
pub fn hypothesis_rates(accepted: &HypothesisList, r1: usize, r: usize) -> Result<RateReport> {
    if r1 < 2 || r1 > r {
        return Err(Error::InvalidParameter(format!("need 2 <= r1 <= r, got r1={r1}, r={r}")));
    }
    let within = accepted.pairs.iter().filter(|&&(i, j)| i < r1 && j < r1).count();
    Ok(RateReport {
        tpr: ratio(within, choose2(r1)),
        fpr: ratio(accepted.len() - within, choose2(r) - choose2(r1)),
        level: RateLevel::Hypothesis,
    })
}

pub fn partition_rates(selected: &[usize], r1: usize, r2: usize, r3: usize) -> RateReport {
    let hits = selected.iter().filter(|&&p| p < r1).count();
    RateReport {
        tpr: ratio(hits, r1),
        fpr: ratio(selected.len() - hits, r2 + r3),
        level: RateLevel::Partition,
    }
}

/// Largest singular value of `estimate - reference` (both symmetric).
pub fn spectral_error(estimate: &DMatrix<f64>, reference: &DMatrix<f64>) -> Result<f64> {
    if estimate.shape() != reference.shape() || estimate.nrows() != estimate.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "{:?} vs {:?}",
            estimate.shape(),
            reference.shape()
        )));
    }
    let diff = estimate - reference;
    let sym = (&diff + diff.transpose()) * 0.5;
    Ok(SymmetricEigen::new(sym)
        .eigenvalues
        .iter()
        .fold(0.0f64, |acc, v| acc.max(v.abs())))
}

/// Empirical covariance `XᵀX / N` of the selected partitions after
/// centering each one.
pub fn pooled_covariance(ds: &PartitionedDataset, selected: &[usize]) -> Result<DMatrix<f64>> {
    if selected.is_empty() {
        return Err(Error::InvalidParameter("no partitions selected".into()));
    }
    let d = ds.d();
    let mut gram = DMatrix::zeros(d, d);
    let mut count = 0usize;
    for &p in selected {
        let part = ds.partitions().get(p).ok_or_else(|| {
            Error::InvalidParameter(format!("partition {p} out of range 0..{}", ds.r()))
        })?;
        let c = center_partition(part);
        let x = DMatrix::from_row_slice(c.n(), d, c.data.values());
        gram += x.transpose() * &x;
        count += c.n();
    }
    Ok(gram / count as f64)
}

/// Settings shared by the simulation studies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySettings {
    pub trials: usize,
    pub kind: StatKind,
    pub epsilon: f64,
    pub gamma: f64,
    /// Monte Carlo size for the reference covariance.
    pub mc_n: usize,
}

impl Default for StudySettings {
    fn default() -> Self {
        Self {
            trials: 200,
            kind: StatKind::Normalized,
            epsilon: 0.0,
            gamma: 0.95,
            mc_n: 50_000,
        }
    }
}

/// Seed of replicate `k`; used for both the simulated data and its tests.
pub fn replicate_seed(seed: u64, k: usize) -> u64 {
    rng::derive(seed, &[stage::REPLICATE, k as u64])
}

fn stepdown_config(settings: &StudySettings, alpha: f64, seed: u64) -> StepdownConfig {
    StepdownConfig {
        alpha,
        trials: settings.trials,
        kind: settings.kind,
        epsilon: settings.epsilon,
        seed,
        ..Default::default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Cobs,
    All,
    Base,
    Oracle,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Cobs => "cobs",
            Method::All => "all",
            Method::Base => "base",
            Method::Oracle => "oracle",
        })
    }
}

pub const METHODS: [Method; 4] = [Method::Cobs, Method::All, Method::Base, Method::Oracle];

/// Three group-1 partitions plus the first partition of groups 2 and 3.
pub fn base_selection(spec: &SimSpec) -> Vec<usize> {
    let mut sel: Vec<usize> = (0..spec.r1.min(3)).collect();
    if spec.r2 > 0 {
        sel.push(spec.r1);
    }
    if spec.r3 > 0 {
        sel.push(spec.r1 + spec.r2);
    }
    sel
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodErrors {
    pub method: Method,
    pub errors: Vec<f64>,
    pub mean: f64,
    /// Mean number of partitions selected.
    pub mean_selected: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonResult {
    pub spec: SimSpec,
    pub alpha: f64,
    pub replicates: usize,
    pub seed: u64,
    pub methods: Vec<MethodErrors>,
}

impl ComparisonResult {
    pub fn mean(&self, method: Method) -> f64 {
        self.methods.iter().find(|m| m.method == method).map_or(f64::NAN, |m| m.mean)
    }
}

pub fn cobs_select(
    ds: &PartitionedDataset,
    alpha: f64,
    settings: &StudySettings,
    seed: u64,
) -> Result<Vec<usize>> {
    let result = StepdownRunner::new(ds, &stepdown_config(settings, alpha, seed))?.run(alpha)?;
    let graph = build_graph(&result.accepted, ds.r())?;
    largest_quasi_clique(&graph, &QuasiCliqueParams { gamma: settings.gamma, ..Default::default() })
}

/// Mean spectral error of the pooled covariance of each method's selection
/// against the Monte Carlo covariance of group 1.
pub fn method_comparison(
    spec: &SimSpec,
    alpha: f64,
    replicates: usize,
    seed: u64,
    settings: &StudySettings,
) -> Result<ComparisonResult> {
    if replicates == 0 {
        return Err(Error::InvalidParameter("at least one replicate is required".into()));
    }
    spec.validate()?;
    let reference = reference_covariance(
        Construction::Sigma1,
        spec.d,
        0.0,
        &spec.marginals,
        settings.mc_n,
        rng::derive(seed, &[stage::SIM_REFERENCE]),
    )?;
    let per_rep = (0..replicates)
        .map(|k| {
            let rep_seed = replicate_seed(seed, k);
            let (ds, truth) = sample_dataset(&SimSpec { seed: rep_seed, ..spec.clone() })?;
            METHODS
                .iter()
                .map(|&m| {
                    let sel = match m {
                        Method::Cobs => cobs_select(&ds, alpha, settings, rep_seed)?,
                        Method::All => (0..ds.r()).collect(),
                        Method::Base => base_selection(spec),
                        Method::Oracle => truth.target_set.clone(),
                    };
                    Ok((spectral_error(&pooled_covariance(&ds, &sel)?, &reference)?, sel.len()))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let methods = METHODS
        .iter()
        .enumerate()
        .map(|(i, &method)| {
            let errors: Vec<f64> = per_rep.iter().map(|r| r[i].0).collect();
            let sizes: f64 = per_rep.iter().map(|r| r[i].1 as f64).sum();
            MethodErrors {
                method,
                mean: errors.iter().sum::<f64>() / replicates as f64,
                mean_selected: sizes / replicates as f64,
                errors,
            }
        })
        .collect();
    Ok(ComparisonResult {
        spec: spec.clone(),
        alpha,
        replicates,
        seed,
        methods,
    })
}

pub fn write_comparison_csv(path: &Path, results: &[ComparisonResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    let io = |e: csv::Error| Error::io(path, e.into());
    w.write_record(["beta", "method", "replicate", "spectral_error"]).map_err(io)?;
    for res in results {
        for m in &res.methods {
            for (k, e) in m.errors.iter().enumerate() {
                w.write_record([res.spec.beta.to_string(), m.method.to_string(), k.to_string(), e.to_string()])
                    .map_err(io)?;
            }
            w.write_record([res.spec.beta.to_string(), m.method.to_string(), "mean".into(), m.mean.to_string()])
                .map_err(io)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Procedure {
    Stepdown,
    Bonferroni,
}

impl fmt::Display for Procedure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Procedure::Stepdown => "stepdown",
            Procedure::Bonferroni => "bonferroni",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub beta: f64,
    pub alpha: f64,
    pub replicate: usize,
    pub seed: u64,
    pub procedure: Procedure,
    pub hypothesis: RateReport,
    /// Rates of the quasi-clique selection on the accepted graph, when requested.
    pub partition: Option<RateReport>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub beta: f64,
    pub alpha: f64,
    pub procedure: Procedure,
    pub hypothesis_tpr: f64,
    pub hypothesis_fpr: f64,
    pub partition_tpr: Option<f64>,
    pub partition_fpr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub replicates: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SweepOptions {
    pub bonferroni: bool,
    pub selection: bool,
}

impl SweepResult {
    /// Replicate means per (β, α, procedure), in grid order.
    pub fn cells(&self) -> Vec<SweepCell> {
        let mut cells: Vec<(SweepCell, usize)> = Vec::new();
        for row in &self.rows {
            let pos = cells.iter().position(|(c, _)| {
                c.beta == row.beta && c.alpha == row.alpha && c.procedure == row.procedure
            });
            let k = pos.unwrap_or_else(|| {
                cells.push((
                    SweepCell {
                        beta: row.beta,
                        alpha: row.alpha,
                        procedure: row.procedure,
                        hypothesis_tpr: 0.0,
                        hypothesis_fpr: 0.0,
                        partition_tpr: row.partition.map(|_| 0.0),
                        partition_fpr: row.partition.map(|_| 0.0),
                    },
                    0,
                ));
                cells.len() - 1
            });
            let (c, n) = &mut cells[k];
            c.hypothesis_tpr += row.hypothesis.tpr;
            c.hypothesis_fpr += row.hypothesis.fpr;
            if let (Some(t), Some(f), Some(p)) = (&mut c.partition_tpr, &mut c.partition_fpr, row.partition) {
                *t += p.tpr;
                *f += p.fpr;
            }
            *n += 1;
        }
        cells
            .into_iter()
            .map(|(mut c, n)| {
                let n = n as f64;
                c.hypothesis_tpr /= n;
                c.hypothesis_fpr /= n;
                c.partition_tpr = c.partition_tpr.map(|t| t / n);
                c.partition_fpr = c.partition_fpr.map(|f| f / n);
                c
            })
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
        let io = |e: csv::Error| Error::io(path, e.into());
        w.write_record([
            "beta",
            "alpha",
            "replicate",
            "seed",
            "procedure",
            "hypothesis_tpr",
            "hypothesis_fpr",
            "partition_tpr",
            "partition_fpr",
        ])
        .map_err(io)?;
        for row in &self.rows {
            let (pt, pf) = row
                .partition
                .map_or((String::new(), String::new()), |p| (p.tpr.to_string(), p.fpr.to_string()));
            w.write_record([
                row.beta.to_string(),
                row.alpha.to_string(),
                row.replicate.to_string(),
                row.seed.to_string(),
                row.procedure.to_string(),
                row.hypothesis.tpr.to_string(),
                row.hypothesis.fpr.to_string(),
                pt,
                pf,
            ])
            .map_err(io)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Runs stepdown (and optionally Bonferroni and quasi-clique selection) on
/// every (β, replicate) simulation for every α. Replicate `k` uses
/// [`replicate_seed`]`(seed, k)` for the data and for the tests, at every β.
pub fn roc_sweep(
    template: &SimSpec,
    betas: &[f64],
    alphas: &[f64],
    replicates: usize,
    seed: u64,
    settings: &StudySettings,
    options: SweepOptions,
) -> Result<SweepResult> {
    if betas.is_empty() || alphas.is_empty() || replicates == 0 {
        return Err(Error::InvalidParameter("sweep grids and replicate count must be non-empty".into()));
    }
    let r = template.r();
    let mut rows = Vec::new();
    for &beta in betas {
        for k in 0..replicates {
            let rep_seed = replicate_seed(seed, k);
            let spec = SimSpec { beta, seed: rep_seed, ..template.clone() };
            let (ds, _) = sample_dataset(&spec)?;
            let prepared = PreparedDataset::new(&ds)?;
            let runner = StepdownRunner::from_prepared(prepared.clone(), &stepdown_config(settings, alphas[0], rep_seed))?;
            let pvalues = if options.bonferroni {
                Some(bonferroni_pvalues(&prepared, settings.trials, settings.kind, settings.epsilon, rep_seed)?)
            } else {
                None
            };
            for &alpha in alphas {
                let mut accepted = vec![(Procedure::Stepdown, runner.run(alpha)?.accepted)];
                if let Some(pv) = &pvalues {
                    accepted.push((Procedure::Bonferroni, bonferroni_accept(pv, alpha)));
                }
                for (procedure, list) in accepted {
                    let partition = if options.selection {
                        let graph = build_graph(&list, r)?;
                        let sel = largest_quasi_clique(
                            &graph,
                            &QuasiCliqueParams { gamma: settings.gamma, ..Default::default() },
                        )?;
                        Some(partition_rates(&sel, spec.r1, spec.r2, spec.r3))
                    } else {
                        None
                    };
                    rows.push(SweepRow {
                        beta,
                        alpha,
                        replicate: k,
                        seed: rep_seed,
                        procedure,
                        hypothesis: hypothesis_rates(&list, spec.r1, r)?,
                        partition,
                    });
                }
            }
        }
    }
    Ok(SweepResult { rows, replicates, seed })
}

/// Linear interpolation of TPR at `fpr` along the curve through `points`
/// (FPR, TPR), with the endpoints (0, 0) and (1, 1) added. `None` outside
/// the FPR range covered by `points` plus the endpoints.
pub fn tpr_at_fpr(points: &[(f64, f64)], fpr: f64) -> Option<f64> {
    let mut curve: Vec<(f64, f64)> = points.to_vec();
    curve.push((0.0, 0.0));
    curve.push((1.0, 1.0));
    curve.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    if !(curve[0].0..=curve[curve.len() - 1].0).contains(&fpr) {
        return None;
    }
    // the best TPR reachable at exactly this FPR, or the interpolated value between neighbors
    let exact: Vec<f64> = curve.iter().filter(|p| p.0 == fpr).map(|p| p.1).collect();
    if !exact.is_empty() {
        return exact.into_iter().reduce(f64::max);
    }
    let k = curve.partition_point(|p| p.0 < fpr);
    let (a, b) = (curve[k - 1], curve[k]);
    Some(a.1 + (b.1 - a.1) * (fpr - a.0) / (b.0 - a.0))
}
