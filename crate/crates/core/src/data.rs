//! Partitioned sample data, CSV ingestion and cached per-partition
//! covariance statistics.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gram::{self, packed_len, row_offset};

/// Row-major `samples x variables` matrix of finite values.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl SampleMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::DimensionMismatch(format!(
                "sample matrix must be non-empty, got {rows}x{cols}"
            )));
        }
        if values.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "non-finite entry at row {}, column {}",
                pos / cols,
                pos % cols
            )));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::DimensionMismatch("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.values[m * self.cols..(m + 1) * self.cols]
    }

    pub fn get(&self, m: usize, j: usize) -> f64 {
        self.values[m * self.cols + j]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn column_means(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.cols];
        for m in 0..self.rows {
            for (s, v) in sums.iter_mut().zip(self.row(m)) {
                *s += v;
            }
        }
        sums.iter().map(|s| s / self.rows as f64).collect()
    }

    /// Stacks matrices with equal column counts.
    pub fn vstack<'a>(parts: impl IntoIterator<Item = &'a SampleMatrix>) -> Result<Self> {
        let mut values = Vec::new();
        let mut rows = 0;
        let mut cols = None;
        for p in parts {
            if *cols.get_or_insert(p.cols) != p.cols {
                return Err(Error::DimensionMismatch("cannot stack differing widths".into()));
            }
            rows += p.rows;
            values.extend_from_slice(&p.values);
        }
        Self::new(rows, cols.unwrap_or(0), values)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub id: usize,
    /// Label from the manifest (or generator) before re-indexing.
    pub label: String,
    pub window: Option<String>,
    pub data: SampleMatrix,
    pub centered: bool,
}

impl Partition {
    pub fn new(id: usize, data: SampleMatrix) -> Self {
        Self {
            id,
            label: id.to_string(),
            window: None,
            data,
            centered: false,
        }
    }

    pub fn n(&self) -> usize {
        self.data.rows()
    }

    pub fn d(&self) -> usize {
        self.data.cols()
    }
}

/// Subtracts each column mean. Idempotent; a single sample becomes all zeros.
pub fn center_partition(p: &Partition) -> Partition {
    if p.centered {
        return p.clone();
    }
    let means = p.data.column_means();
    let cols = p.d();
    let values = p
        .data
        .values()
        .iter()
        .enumerate()
        .map(|(k, v)| v - means[k % cols])
        .collect();
    Partition {
        data: SampleMatrix {
            rows: p.n(),
            cols,
            values,
        },
        centered: true,
        ..p.clone()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionedDataset {
    partitions: Vec<Partition>,
    d: usize,
}

impl PartitionedDataset {
    /// Partitions are re-indexed `0..r` in the given order.
    pub fn new(mut partitions: Vec<Partition>) -> Result<Self> {
        let d = match partitions.first() {
            Some(p) => p.d(),
            None => return Err(Error::EmptyDataset { min_samples: 0 }),
        };
        for (id, p) in partitions.iter_mut().enumerate() {
            if p.d() != d {
                return Err(Error::DimensionMismatch(format!(
                    "partition {} has {} variables, expected {d}",
                    p.label,
                    p.d()
                )));
            }
            p.id = id;
        }
        Ok(Self { partitions, d })
    }

    pub fn partitions(&self) -> &[Partition] {
        &self.partitions
    }

    pub fn partition(&self, p: usize) -> &Partition {
        &self.partitions[p]
    }

    pub fn r(&self) -> usize {
        self.partitions.len()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn total_samples(&self) -> usize {
        self.partitions.iter().map(Partition::n).sum()
    }

    /// Global position of each partition's first sample.
    pub fn sample_offsets(&self) -> Vec<usize> {
        self.partitions
            .iter()
            .scan(0, |acc, p| {
                let start = *acc;
                *acc += p.n();
                Some(start)
            })
            .collect()
    }

    pub fn centered(&self) -> Self {
        Self {
            partitions: self.partitions.iter().map(center_partition).collect(),
            d: self.d,
        }
    }

    /// Restricts to the listed partition ids, re-indexed in the given order.
    pub fn subset(&self, ids: &[usize]) -> Result<Self> {
        let parts = ids
            .iter()
            .map(|&p| {
                self.partitions.get(p).cloned().ok_or_else(|| {
                    Error::InvalidParameter(format!("partition {p} out of range 0..{}", self.r()))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(parts)
    }

    /// Canonical little-endian serialization, stable across runs.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&(self.r() as u64).to_le_bytes());
        out.extend_from_slice(&(self.d as u64).to_le_bytes());
        for p in &self.partitions {
            write_str(&mut out, &p.label);
            match &p.window {
                Some(w) => {
                    out.push(1);
                    write_str(&mut out, w);
                }
                None => out.push(0),
            }
            out.push(p.centered as u8);
            out.extend_from_slice(&(p.n() as u64).to_le_bytes());
            for v in p.data.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u64).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

/// Reads a samples x variables CSV (header of variable names) and a
/// `sample_id,partition_id[,window]` manifest. Sample ids are 0-based data
/// row indices. Partitions keep the order of their first manifest entry;
/// those with fewer than `min_samples` samples are dropped.
pub fn load_dataset(
    matrix_file: &Path,
    manifest_file: &Path,
    min_samples: usize,
) -> Result<PartitionedDataset> {
    let rows = read_matrix_csv(matrix_file)?;
    let d = rows.first().map_or(0, Vec::len);
    let manifest = read_manifest(manifest_file)?;

    if manifest.len() != rows.len() {
        return Err(Error::DimensionMismatch(format!(
            "manifest lists {} samples but the matrix has {} rows",
            manifest.len(),
            rows.len()
        )));
    }
    let mut seen = vec![false; rows.len()];
    let mut order: Vec<String> = Vec::new();
    let mut members: HashMap<String, (Option<String>, Vec<usize>)> = HashMap::new();
    for (line, entry) in manifest.iter().enumerate() {
        if entry.sample >= rows.len() {
            return Err(Error::parse(
                manifest_file,
                format!(
                    "line {}: sample id {} not present in matrix ({} rows)",
                    line + 2,
                    entry.sample,
                    rows.len()
                ),
            ));
        }
        if std::mem::replace(&mut seen[entry.sample], true) {
            return Err(Error::parse(
                manifest_file,
                format!("line {}: duplicate sample id {}", line + 2, entry.sample),
            ));
        }
        let slot = members.entry(entry.partition.clone()).or_insert_with(|| {
            order.push(entry.partition.clone());
            (entry.window.clone(), Vec::new())
        });
        if slot.0 != entry.window {
            return Err(Error::parse(
                manifest_file,
                format!(
                    "line {}: partition {} has conflicting window labels",
                    line + 2,
                    entry.partition
                ),
            ));
        }
        slot.1.push(entry.sample);
    }

    let mut partitions = Vec::new();
    for label in order {
        let (window, samples) = members.remove(&label).unwrap_or_default();
        if samples.len() < min_samples {
            continue;
        }
        let values = samples.iter().flat_map(|&s| rows[s].iter().copied()).collect();
        partitions.push(Partition {
            id: partitions.len(),
            label,
            window,
            data: SampleMatrix::new(samples.len(), d, values)?,
            centered: false,
        });
    }
    if partitions.is_empty() {
        return Err(Error::EmptyDataset { min_samples });
    }
    PartitionedDataset::new(partitions)
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.kind() {
        csv::ErrorKind::Io(_) => match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        },
        _ => Error::parse(path, e.to_string()),
    }
}

fn read_matrix_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(BufReader::new(open(path)?));
    let width = reader.headers().map_err(|e| csv_error(path, e))?.len();
    let mut rows = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(path, e))?;
        if record.len() != width {
            return Err(Error::DimensionMismatch(format!(
                "{}: row {} has {} cells, header has {width}",
                path.display(),
                r,
                record.len()
            )));
        }
        let row = record
            .iter()
            .enumerate()
            .map(|(c, cell)| {
                cell.trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| {
                        Error::parse(path, format!("row {r}, column {c}: non-numeric cell {cell:?}"))
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    if rows.is_empty() || width == 0 {
        return Err(Error::parse(path, "matrix has no samples"));
    }
    Ok(rows)
}

struct ManifestEntry {
    sample: usize,
    partition: String,
    window: Option<String>,
}

fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(BufReader::new(open(path)?));
    let mut entries = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(path, e))?;
        if record.len() < 2 {
            return Err(Error::parse(
                path,
                format!("line {}: expected sample_id,partition_id[,window]", line + 2),
            ));
        }
        let sample = record[0].trim().parse::<usize>().map_err(|_| {
            Error::parse(path, format!("line {}: bad sample id {:?}", line + 2, &record[0]))
        })?;
        entries.push(ManifestEntry {
            sample,
            partition: record[1].trim().to_string(),
            window: record
                .get(2)
                .map(str::trim)
                .filter(|w| !w.is_empty())
                .map(String::from),
        });
    }
    Ok(entries)
}

/// Empirical covariance `X'X/n` and the empirical variance of each of its
/// entries, `s_ij = sum_m (x_mi x_mj - sigma_ij)^2 / n`, for a centered
/// partition. Both are kept in packed upper-triangle form.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionStats {
    pub n: usize,
    pub d: usize,
    sigma: Vec<f64>,
    s: Vec<f64>,
}

impl PartitionStats {
    /// Builds statistics from packed upper-triangle arrays.
    pub fn from_packed(n: usize, d: usize, sigma: Vec<f64>, s: Vec<f64>) -> Self {
        assert_eq!(sigma.len(), packed_len(d));
        assert_eq!(s.len(), packed_len(d));
        Self { n, d, sigma, s }
    }

    pub fn sigma_hat(&self) -> DMatrix<f64> {
        gram::unpack(self.d, &self.sigma)
    }

    pub fn s_hat(&self) -> DMatrix<f64> {
        gram::unpack(self.d, &self.s)
    }

    pub fn sigma_packed(&self) -> &[f64] {
        &self.sigma
    }

    pub fn s_packed(&self) -> &[f64] {
        &self.s
    }
}

pub fn partition_stats(p: &Partition) -> Result<PartitionStats> {
    if !p.centered {
        return Err(Error::NotCentered(p.id));
    }
    let (n, d) = (p.n(), p.d());
    let mut sigma = vec![0.0; packed_len(d)];
    gram::weighted_gram_rows(&p.data, None, 0..d, &mut sigma);
    sigma.iter_mut().for_each(|v| *v /= n as f64);

    let mut s = vec![0.0; packed_len(d)];
    for m in 0..n {
        let x = p.data.row(m);
        for i in 0..d {
            let a = x[i];
            let off = row_offset(d, i);
            let sig = &sigma[off..off + d - i];
            for ((o, &xj), &sg) in s[off..off + d - i].iter_mut().zip(&x[i..]).zip(sig) {
                let dev = a * xj - sg;
                *o += dev * dev;
            }
        }
    }
    s.iter_mut().for_each(|v| *v /= n as f64);
    Ok(PartitionStats { n, d, sigma, s })
}

/// Simulation ground truth for the two-population mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureGroundTruth {
    pub indicator: Vec<bool>,
    /// Mixture proportion per window label.
    pub gamma_w: BTreeMap<String, f64>,
    pub target_set: Vec<usize>,
}

impl MixtureGroundTruth {
    pub fn from_indicator(indicator: Vec<bool>, gamma_w: BTreeMap<String, f64>) -> Self {
        let target_set = indicator
            .iter()
            .enumerate()
            .filter_map(|(p, &on)| on.then_some(p))
            .collect();
        Self {
            indicator,
            gamma_w,
            target_set,
        }
    }
}

const CACHE_MAGIC: &[u8; 8] = b"COBSSTAT";
const CACHE_VERSION: u32 = 1;

/// Writes per-partition statistics to a binary sidecar file.
///
/// Layout (little-endian): 8-byte magic `COBSSTAT`, `u32` version, 64
/// ASCII hex characters of the dataset content hash, `u64` r, `u64` d,
/// then per partition `u64` n followed by the packed sigma and s arrays
/// (`d(d+1)/2` `f64` each).
pub fn save_stats_cache(path: &Path, ds: &PartitionedDataset, stats: &[PartitionStats]) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    out.extend_from_slice(ds.content_hash().as_bytes());
    out.extend_from_slice(&(stats.len() as u64).to_le_bytes());
    out.extend_from_slice(&(ds.d() as u64).to_le_bytes());
    for st in stats {
        out.extend_from_slice(&(st.n as u64).to_le_bytes());
        for v in st.sigma.iter().chain(&st.s) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| Error::io(path, e))
}

/// Reads a sidecar written by [`save_stats_cache`]. Returns `None` when the
/// file belongs to different data or an older format.
pub fn load_stats_cache(path: &Path, ds: &PartitionedDataset) -> Result<Option<Vec<PartitionStats>>> {
    let mut bytes = Vec::new();
    open(path)?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    let bad = || Error::parse(path, "truncated stats cache");
    if cur.take(8).ok_or_else(bad)? != CACHE_MAGIC {
        return Err(Error::parse(path, "not a stats cache file"));
    }
    let version = u32::from_le_bytes(cur.take(4).ok_or_else(bad)?.try_into().unwrap());
    let hash = cur.take(64).ok_or_else(bad)?;
    if version != CACHE_VERSION || hash != ds.content_hash().as_bytes() {
        return Ok(None);
    }
    let r = cur.u64().ok_or_else(bad)? as usize;
    let d = cur.u64().ok_or_else(bad)? as usize;
    let len = packed_len(d);
    let mut stats = Vec::with_capacity(r);
    for _ in 0..r {
        let n = cur.u64().ok_or_else(bad)? as usize;
        let mut vals = (0..2 * len).map(|_| cur.f64()).collect::<Option<Vec<_>>>().ok_or_else(bad)?;
        let s = vals.split_off(len);
        stats.push(PartitionStats { n, d, sigma: vals, s });
    }
    Ok(Some(stats))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, k: usize) -> Option<&'a [u8]> {
        let out = self.bytes.get(self.pos..self.pos + k)?;
        self.pos += k;
        Some(out)
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn f64(&mut self) -> Option<f64> {
        self.take(8).map(|b| f64::from_le_bytes(b.try_into().unwrap()))
    }
}
