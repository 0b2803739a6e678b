//! Synthetic partitioned datasets: block-structured proxy covariances,
//! Gaussian draws, and monotone marginal transforms (nonparanormal data).

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::data::{MixtureGroundTruth, Partition, PartitionedDataset, SampleMatrix};
use crate::error::{Error, Result};
use crate::rng::{self, stage};

const WITHIN: f64 = 0.9;
const BETWEEN: f64 = 0.1;
const GRID_POINTS: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Construction {
    Sigma1,
    Sigma2,
    Sigma3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProxyCovariance {
    pub matrix: DMatrix<f64>,
    pub construction: Construction,
    pub a: f64,
    pub b: f64,
    pub beta: f64,
}

fn floor_guarded(x: f64) -> usize {
    (x + 1e-9).floor() as usize
}

fn sbm(labels: &[usize], a: f64, b: f64) -> DMatrix<f64> {
    let d = labels.len();
    DMatrix::from_fn(d, d, |i, j| {
        if i == j {
            1.0
        } else if labels[i] == labels[j] {
            a
        } else {
            b
        }
    })
}

fn halves(d: usize) -> Vec<usize> {
    (0..d).map(|j| usize::from(j >= d / 2)).collect()
}

pub fn sigma1(d: usize) -> ProxyCovariance {
    ProxyCovariance {
        matrix: sbm(&halves(d), WITHIN, BETWEEN),
        construction: Construction::Sigma1,
        a: WITHIN,
        b: BETWEEN,
        beta: 0.0,
    }
}

pub fn sigma2(d: usize, beta: f64) -> ProxyCovariance {
    let a = WITHIN - 0.4 * beta;
    let b = BETWEEN + 0.4 * beta;
    ProxyCovariance {
        matrix: sbm(&halves(d), a, b),
        construction: Construction::Sigma2,
        a,
        b,
        beta,
    }
}

/// Cluster label (0, 1, 2) of each variable in the three-cluster construction.
pub fn sigma3_labels(d: usize, beta: f64) -> Vec<usize> {
    let shift = floor_guarded(beta * d as f64 / 6.0);
    let half = d / 2;
    let upper = floor_guarded(d as f64 / 2.0 + beta * d as f64 / 6.0);
    (1..=d)
        .map(|j| {
            if j <= shift || (j > half && j <= upper) {
                0
            } else if j <= half {
                1
            } else {
                2
            }
        })
        .collect()
}

pub fn sigma3(d: usize, beta: f64) -> ProxyCovariance {
    ProxyCovariance {
        matrix: sbm(&sigma3_labels(d, beta), WITHIN, BETWEEN),
        construction: Construction::Sigma3,
        a: WITHIN,
        b: BETWEEN,
        beta,
    }
}

pub fn proxy(construction: Construction, d: usize, beta: f64) -> ProxyCovariance {
    match construction {
        Construction::Sigma1 => sigma1(d),
        Construction::Sigma2 => sigma2(d, beta),
        Construction::Sigma3 => sigma3(d, beta),
    }
}

/// Symmetric square root with negative eigenvalues clamped to zero.
pub fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Factorization("matrix has non-finite entries".into()));
    }
    let eig = SymmetricEigen::new(m.clone());
    let scale = eig.eigenvalues.iter().fold(0.0f64, |acc, v| acc.max(v.abs())).max(1.0);
    if let Some(v) = eig.eigenvalues.iter().find(|&&v| v < -1e-8 * scale) {
        return Err(Error::Factorization(format!("matrix is not positive semidefinite (eigenvalue {v})")));
    }
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    let q = &eig.eigenvectors;
    Ok(q * DMatrix::from_diagonal(&roots) * q.transpose())
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Monotone CDF tabulated on a grid and inverted by binary search plus
/// linear interpolation.
#[derive(Debug, Clone, PartialEq)]
pub struct TabulatedCdf {
    x: Vec<f64>,
    cdf: Vec<f64>,
}

impl TabulatedCdf {
    pub fn new(lo: f64, hi: f64, cdf: impl Fn(f64) -> f64) -> Self {
        let step = (hi - lo) / (GRID_POINTS - 1) as f64;
        let x: Vec<f64> = (0..GRID_POINTS).map(|k| lo + step * k as f64).collect();
        let mut values: Vec<f64> = x.iter().map(|&t| cdf(t)).collect();
        for k in 1..values.len() {
            values[k] = values[k].max(values[k - 1]);
        }
        Self { x, cdf: values }
    }

    pub fn cdf(&self, t: f64) -> f64 {
        interpolate(&self.x, &self.cdf, t)
    }

    pub fn quantile(&self, u: f64) -> f64 {
        interpolate(&self.cdf, &self.x, u)
    }
}

/// Piecewise-linear interpolation of `(xs, ys)` at `t`, clamped to the ends;
/// `xs` non-decreasing.
fn interpolate(xs: &[f64], ys: &[f64], t: f64) -> f64 {
    let k = xs.partition_point(|&v| v < t);
    if k == 0 {
        return ys[0];
    }
    if k == xs.len() {
        return ys[xs.len() - 1];
    }
    let (x0, x1) = (xs[k - 1], xs[k]);
    if x1 <= x0 {
        return ys[k];
    }
    ys[k - 1] + (ys[k] - ys[k - 1]) * (t - x0) / (x1 - x0)
}

/// Gaussian kernel density estimate with the `bw.nrd0` bandwidth.
pub fn kde_cdf(samples: &[f64]) -> Result<TabulatedCdf> {
    if samples.len() < 2 {
        return Err(Error::InvalidParameter("a density estimate needs at least 2 samples".into()));
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let sd = (samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let h = (n - 1.0) * p;
        let lo = h.floor() as usize;
        let hi = (lo + 1).min(sorted.len() - 1);
        sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
    };
    let iqr = q(0.75) - q(0.25);
    let mut spread = sd.min(iqr / 1.34);
    if spread <= 0.0 {
        spread = if sd > 0.0 { sd } else if sorted[0] != 0.0 { sorted[0].abs() } else { 1.0 };
    }
    let h = 0.9 * spread * n.powf(-0.2);
    let (lo, hi) = (sorted[0] - 4.0 * h, sorted[sorted.len() - 1] + 4.0 * h);
    Ok(TabulatedCdf::new(lo, hi, |t| {
        samples.iter().map(|&x| normal_cdf((t - x) / h)).sum::<f64>() / n
    }))
}

#[derive(Debug, Clone, PartialEq)]
pub enum MarginalFamily {
    GaussianIdentity,
    Bimodal,
    HeavyTail,
    /// Per-variable KDE targets built from the columns of a sample file;
    /// variable `j` uses column `j mod columns`.
    Empirical { path: PathBuf, columns: Arc<Vec<TabulatedCdf>> },
}

impl MarginalFamily {
    pub fn empirical(path: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(path)
            .map_err(|e| Error::io(path, e.into()))?;
        let mut columns: Vec<Vec<f64>> = Vec::new();
        for (line, record) in reader.records().enumerate() {
            let record = record.map_err(|e| Error::parse(path, e.to_string()))?;
            if columns.is_empty() {
                columns = vec![Vec::new(); record.len()];
            }
            if record.len() != columns.len() {
                return Err(Error::parse(path, format!("row {} has {} fields", line + 1, record.len())));
            }
            for (c, field) in record.iter().enumerate() {
                let v: f64 = field.trim().parse().map_err(|_| {
                    Error::parse(path, format!("non-numeric value {field:?} on row {}", line + 1))
                })?;
                columns[c].push(v);
            }
        }
        if columns.is_empty() {
            return Err(Error::parse(path, "marginal sample file has no rows"));
        }
        let tables = columns.iter().map(|c| kde_cdf(c)).collect::<Result<Vec<_>>>()?;
        Ok(MarginalFamily::Empirical {
            path: path.to_path_buf(),
            columns: Arc::new(tables),
        })
    }

    pub fn name(&self) -> String {
        match self {
            MarginalFamily::GaussianIdentity => "gaussian".into(),
            MarginalFamily::Bimodal => "bimodal".into(),
            MarginalFamily::HeavyTail => "heavytail".into(),
            MarginalFamily::Empirical { path, .. } => format!("empirical:{}", path.display()),
        }
    }
}

impl fmt::Display for MarginalFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for MarginalFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" | "gaussian-identity" => Ok(MarginalFamily::GaussianIdentity),
            "bimodal" => Ok(MarginalFamily::Bimodal),
            "heavytail" => Ok(MarginalFamily::HeavyTail),
            other => match other.strip_prefix("empirical:") {
                Some(path) => MarginalFamily::empirical(Path::new(path)),
                None => Err(Error::Config(format!(
                    "unknown marginal family {other:?} (gaussian, bimodal, heavytail, empirical:<file>)"
                ))),
            },
        }
    }
}

impl Serialize for MarginalFamily {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.name())
    }
}

impl<'de> Deserialize<'de> for MarginalFamily {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

fn bimodal_table() -> &'static TabulatedCdf {
    static TABLE: std::sync::OnceLock<TabulatedCdf> = std::sync::OnceLock::new();
    TABLE.get_or_init(|| TabulatedCdf::new(-10.0, 10.0, bimodal_cdf))
}

/// CDF of ½N(−2, 1) + ½N(2, 1).
pub fn bimodal_cdf(x: f64) -> f64 {
    0.5 * normal_cdf(x + 2.0) + 0.5 * normal_cdf(x - 2.0)
}

/// CDF of the unit-variance logistic distribution.
pub fn heavytail_cdf(x: f64) -> f64 {
    1.0 / (1.0 + (-x * std::f64::consts::PI / 3f64.sqrt()).exp())
}

/// Maps a standard normal score `z` to the target marginal of variable `j`
/// by matching quantiles.
fn transform(family: &MarginalFamily, j: usize, z: f64) -> f64 {
    match family {
        MarginalFamily::GaussianIdentity => z,
        MarginalFamily::Bimodal => bimodal_table().quantile(normal_cdf(z)),
        MarginalFamily::HeavyTail => {
            // log(u / (1 - u)) with both tails taken from erfc
            let lower = normal_cdf(z);
            let upper = normal_cdf(-z);
            3f64.sqrt() / std::f64::consts::PI * (lower.ln() - upper.ln())
        }
        MarginalFamily::Empirical { columns, .. } => {
            columns[j % columns.len()].quantile(normal_cdf(z))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSpec {
    pub r1: usize,
    pub r2: usize,
    pub r3: usize,
    pub n: usize,
    pub d: usize,
    pub beta: f64,
    pub marginals: MarginalFamily,
    pub seed: u64,
}

impl Default for SimSpec {
    fn default() -> Self {
        Self {
            r1: 15,
            r2: 5,
            r3: 5,
            n: 15,
            d: 100,
            beta: 0.0,
            marginals: MarginalFamily::GaussianIdentity,
            seed: 0,
        }
    }
}

impl SimSpec {
    pub fn r(&self) -> usize {
        self.r1 + self.r2 + self.r3
    }

    pub fn validate(&self) -> Result<()> {
        if self.r1 == 0 || self.n == 0 || self.d == 0 {
            return Err(Error::InvalidParameter("r1, n and d must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::InvalidParameter(format!("beta must lie in [0, 1], got {}", self.beta)));
        }
        Ok(())
    }

    /// Group (1, 2 or 3) of partition `p`.
    pub fn group(&self, p: usize) -> usize {
        if p < self.r1 {
            1
        } else if p < self.r1 + self.r2 {
            2
        } else {
            3
        }
    }
}

/// `rows` draws of the transformed vector, one per row, from the stream `path`.
fn draw_rows(
    root: &DMatrix<f64>,
    family: &MarginalFamily,
    rows: usize,
    seed: u64,
    path: &[u64],
) -> Vec<f64> {
    let d = root.nrows();
    let mut rng = rng::stream(seed, path);
    let mut out = Vec::with_capacity(rows * d);
    for _ in 0..rows {
        let e = rng::gaussian_vec(&mut rng, d);
        for j in 0..d {
            let z: f64 = root.row(j).iter().zip(&e).map(|(a, b)| a * b).sum();
            out.push(transform(family, j, z));
        }
    }
    out
}

pub fn sample_dataset(spec: &SimSpec) -> Result<(PartitionedDataset, MixtureGroundTruth)> {
    spec.validate()?;
    let roots = [
        psd_sqrt(&sigma1(spec.d).matrix)?,
        psd_sqrt(&sigma2(spec.d, spec.beta).matrix)?,
        psd_sqrt(&sigma3(spec.d, spec.beta).matrix)?,
    ];
    let partitions = (0..spec.r())
        .into_par_iter()
        .map(|p| {
            let group = spec.group(p);
            let values = draw_rows(
                &roots[group - 1],
                &spec.marginals,
                spec.n,
                spec.seed,
                &[stage::SIM_PARTITION, p as u64],
            );
            let mut part = Partition::new(p, SampleMatrix::new(spec.n, spec.d, values)?);
            part.window = Some(format!("group{group}"));
            Ok(part)
        })
        .collect::<Result<Vec<_>>>()?;
    let indicator: Vec<bool> = (0..spec.r()).map(|p| spec.group(p) == 1).collect();
    let mut gamma_w = BTreeMap::new();
    for (group, count) in [(1, spec.r1), (2, spec.r2), (3, spec.r3)] {
        if count > 0 {
            gamma_w.insert(format!("group{group}"), if group == 1 { 1.0 } else { 0.0 });
        }
    }
    Ok((
        PartitionedDataset::new(partitions)?,
        MixtureGroundTruth::from_indicator(indicator, gamma_w),
    ))
}

/// Monte Carlo covariance of the transformed distribution with latent
/// covariance from `construction`.
pub fn reference_covariance(
    construction: Construction,
    d: usize,
    beta: f64,
    marginals: &MarginalFamily,
    mc_n: usize,
    seed: u64,
) -> Result<DMatrix<f64>> {
    if mc_n < 10_000 {
        return Err(Error::InvalidParameter(format!("mc_n must be at least 10000, got {mc_n}")));
    }
    let root = psd_sqrt(&proxy(construction, d, beta).matrix)?;
    const CHUNK: usize = 2048;
    let chunks = mc_n.div_ceil(CHUNK);
    let partial: Vec<(Vec<f64>, DMatrix<f64>)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let rows = CHUNK.min(mc_n - c * CHUNK);
            let values = draw_rows(&root, marginals, rows, seed, &[stage::SIM_REFERENCE, c as u64]);
            let x = DMatrix::from_row_slice(rows, d, &values);
            let sums = (0..d).map(|j| x.column(j).sum()).collect();
            (sums, x.transpose() * &x)
        })
        .collect();
    let mut sums = vec![0.0; d];
    let mut gram = DMatrix::zeros(d, d);
    for (s, g) in partial {
        sums.iter_mut().zip(&s).for_each(|(a, b)| *a += b);
        gram += g;
    }
    let n = mc_n as f64;
    Ok(DMatrix::from_fn(d, d, |i, j| gram[(i, j)] / n - sums[i] / n * sums[j] / n))
}

/// Writes `<prefix>_matrix.csv`, `<prefix>_manifest.csv` and `<prefix>_truth.json`.
pub fn write_simulation(prefix: &Path, ds: &PartitionedDataset, truth: &MixtureGroundTruth) -> Result<[PathBuf; 3]> {
    let with_suffix = |suffix: &str| {
        let mut name = prefix.as_os_str().to_owned();
        name.push(suffix);
        PathBuf::from(name)
    };
    let matrix_path = with_suffix("_matrix.csv");
    let manifest_path = with_suffix("_manifest.csv");
    let truth_path = with_suffix("_truth.json");

    let mut matrix = csv::Writer::from_path(&matrix_path).map_err(|e| Error::io(&matrix_path, e.into()))?;
    let mut manifest = csv::Writer::from_path(&manifest_path).map_err(|e| Error::io(&manifest_path, e.into()))?;
    let header: Vec<String> = (0..ds.d()).map(|j| format!("v{j}")).collect();
    matrix.write_record(&header).map_err(|e| Error::io(&matrix_path, e.into()))?;
    manifest
        .write_record(["sample_id", "partition_id", "window"])
        .map_err(|e| Error::io(&manifest_path, e.into()))?;
    let mut sample = 0usize;
    for part in ds.partitions() {
        for m in 0..part.n() {
            matrix
                .write_record(part.data.row(m).iter().map(|v| v.to_string()))
                .map_err(|e| Error::io(&matrix_path, e.into()))?;
            manifest
                .write_record([
                    sample.to_string(),
                    part.label.clone(),
                    part.window.clone().unwrap_or_default(),
                ])
                .map_err(|e| Error::io(&manifest_path, e.into()))?;
            sample += 1;
        }
    }
    matrix.flush().map_err(|e| Error::io(&matrix_path, e))?;
    manifest.flush().map_err(|e| Error::io(&manifest_path, e))?;
    let json = serde_json::to_string_pretty(truth).expect("ground truth serializes");
    std::fs::write(&truth_path, json + "\n").map_err(|e| Error::io(&truth_path, e))?;
    Ok([matrix_path, manifest_path, truth_path])
}
