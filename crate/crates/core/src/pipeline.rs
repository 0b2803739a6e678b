//! End-to-end run driven by a flat TOML config: load, stepdown, graph,
//! quasi-clique selection and the homogeneity diagnostic, with every
//! artifact written to one output directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::covtest::StatKind;
use crate::data::{load_dataset, PartitionedDataset};
use crate::diagnostic::{homogeneity_diagnostic, ks_critical_1pct, ks_uniform, qq_points, write_qq_csv, DiagnosticParams};
use crate::error::{Error, Result};
use crate::quasiclique::{build_graph, largest_quasi_clique_traced, HypothesisGraph, QuasiCliqueParams, SearchTrace};
use crate::rng::{self, stage};
use crate::stepdown::{stepdown, Engine, MultiplierSchedule, StepdownConfig, StepdownResult};

pub const STEPDOWN_FILE: &str = "stepdown.json";
pub const GRAPH_FILE: &str = "graph.json";
pub const SELECTION_FILE: &str = "selection.json";
pub const DIAGNOSTIC_FILE: &str = "diagnostic.csv";
pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub matrix: PathBuf,
    pub manifest: PathBuf,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub min_samples: usize,
    pub alpha: f64,
    pub trials: usize,
    pub stat: StatKind,
    pub epsilon: f64,
    pub engine: Engine,
    pub schedule: MultiplierSchedule,
    pub gamma: f64,
    /// Partition ids forced into the selection; empty for none.
    pub core: Vec<usize>,
    pub postprocess: bool,
    pub divisions: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            matrix: PathBuf::from("matrix.csv"),
            manifest: PathBuf::from("manifest.csv"),
            out_dir: PathBuf::from("cobs_out"),
            seed: 0,
            min_samples: 5,
            alpha: 0.1,
            trials: 200,
            stat: StatKind::Normalized,
            epsilon: 0.0,
            engine: Engine::Naive,
            schedule: MultiplierSchedule::Shared,
            gamma: 0.95,
            core: Vec::new(),
            postprocess: false,
            divisions: 250,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file and applies `key=value` overrides, each value in
    /// TOML syntax (bare words are taken as strings).
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::parse(path, e.to_string()))?;
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {item:?} is not key=value")))?;
            let value = format!("v = {raw}")
                .parse::<toml::Table>()
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_string()));
            table.insert(key.trim().to_string(), value);
        }
        let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma must lie in [0, 1], got {}", self.gamma)));
        }
        if self.trials == 0 || self.divisions == 0 {
            return Err(Error::Config("trials and divisions must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML serialization.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn stepdown_seed(&self) -> u64 {
        rng::derive(self.seed, &[stage::PIPELINE, stage::STEPDOWN])
    }

    pub fn diagnostic_seed(&self) -> u64 {
        rng::derive(self.seed, &[stage::PIPELINE, stage::DIAGNOSTIC_SPLIT])
    }

    pub fn stepdown_config(&self) -> StepdownConfig {
        StepdownConfig {
            alpha: self.alpha,
            trials: self.trials,
            kind: self.stat,
            epsilon: self.epsilon,
            seed: self.stepdown_seed(),
            engine: self.engine,
            schedule: self.schedule,
            ..Default::default()
        }
    }

    pub fn selection_params(&self) -> QuasiCliqueParams {
        QuasiCliqueParams {
            gamma: self.gamma,
            core: (!self.core.is_empty()).then(|| self.core.clone()),
            postprocess: self.postprocess,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphArtifact {
    pub r: usize,
    pub edges: Vec<(usize, usize)>,
}

impl From<&HypothesisGraph> for GraphArtifact {
    fn from(g: &HypothesisGraph) -> Self {
        Self { r: g.r(), edges: g.edges() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionArtifact {
    pub method: String,
    pub gamma: f64,
    pub core: Option<Vec<usize>>,
    pub postprocess: bool,
    pub selected: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<SearchTrace>,
}

/// Quasi-clique selection on the graph of a stepdown result.
pub fn select_from_stepdown(result: &StepdownResult, params: &QuasiCliqueParams) -> Result<SelectionArtifact> {
    let graph = build_graph(&result.accepted, result.r)?;
    let (selected, trace) = largest_quasi_clique_traced(&graph, params)?;
    Ok(SelectionArtifact {
        method: "cobs".into(),
        gamma: params.gamma,
        core: params.core.clone(),
        postprocess: params.postprocess,
        selected,
        trace: Some(trace),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticSummary {
    pub divisions: usize,
    pub mean_pvalue: f64,
    pub ks: f64,
    pub ks_critical_1pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    pub dataset_hash: String,
    /// Derived seeds per stage.
    pub seeds: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub selected: Vec<usize>,
    pub selected_labels: Vec<String>,
    pub r: usize,
    pub d: usize,
    pub accepted_pairs: usize,
    pub stepdown_steps: usize,
    /// Artifact file names inside the output directory, by stage.
    pub artifacts: BTreeMap<String, String>,
    pub diagnostic: Option<DiagnosticSummary>,
    pub config: RunConfig,
    pub provenance: Provenance,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("artifact serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))
}

fn staged<T>(stage: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.at_stage(stage))
}

pub fn run_pipeline(cfg: &RunConfig) -> Result<PipelineReport> {
    staged("config", cfg.validate())?;
    let ds: PartitionedDataset = staged("load", load_dataset(&cfg.matrix, &cfg.manifest, cfg.min_samples))?;
    let out = &cfg.out_dir;
    staged("output", fs::create_dir_all(out).map_err(|e| Error::io(out, e)))?;

    let sd = staged("stepdown", stepdown(&ds, &cfg.stepdown_config()))?;
    staged("stepdown", write_json(&out.join(STEPDOWN_FILE), &sd))?;

    let graph = staged("graph", build_graph(&sd.accepted, ds.r()))?;
    staged("graph", write_json(&out.join(GRAPH_FILE), &GraphArtifact::from(&graph)))?;

    let selection = staged("select", select_from_stepdown(&sd, &cfg.selection_params()))?;
    staged("select", write_json(&out.join(SELECTION_FILE), &selection))?;

    let mut artifacts = BTreeMap::from([
        ("stepdown".to_string(), STEPDOWN_FILE.to_string()),
        ("graph".to_string(), GRAPH_FILE.to_string()),
        ("selection".to_string(), SELECTION_FILE.to_string()),
    ]);
    let diag_path = out.join(DIAGNOSTIC_FILE);
    let diagnostic = if selection.selected.len() >= 2 {
        let params = DiagnosticParams {
            divisions: cfg.divisions,
            trials: cfg.trials,
            kind: cfg.stat,
            epsilon: cfg.epsilon,
            seed: cfg.diagnostic_seed(),
        };
        let res = staged("diagnostic", homogeneity_diagnostic(&ds, &selection.selected, &params))?;
        staged("diagnostic", write_qq_csv(&diag_path, &qq_points(&res.pvalues)))?;
        artifacts.insert("diagnostic".into(), DIAGNOSTIC_FILE.into());
        Some(DiagnosticSummary {
            divisions: res.pvalues.len(),
            mean_pvalue: res.pvalues.iter().sum::<f64>() / res.pvalues.len() as f64,
            ks: ks_uniform(&res.pvalues),
            ks_critical_1pct: ks_critical_1pct(res.pvalues.len()),
        })
    } else {
        if diag_path.exists() {
            staged("diagnostic", fs::remove_file(&diag_path).map_err(|e| Error::io(&diag_path, e)))?;
        }
        None
    };

    let report = PipelineReport {
        selected_labels: selection.selected.iter().map(|&p| ds.partition(p).label.clone()).collect(),
        selected: selection.selected,
        r: ds.r(),
        d: ds.d(),
        accepted_pairs: sd.accepted.len(),
        stepdown_steps: sd.steps,
        artifacts,
        diagnostic,
        config: cfg.clone(),
        provenance: Provenance {
            config_hash: cfg.hash(),
            seed: cfg.seed,
            version: env!("CARGO_PKG_VERSION").into(),
            dataset_hash: ds.content_hash(),
            seeds: BTreeMap::from([
                ("stepdown".to_string(), cfg.stepdown_seed()),
                ("diagnostic".to_string(), cfg.diagnostic_seed()),
            ]),
        },
    };
    staged("report", write_json(&out.join(REPORT_FILE), &report))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simgen::{sample_dataset, write_simulation, SimSpec};

    fn sim_config(dir: &Path, beta: f64, seed: u64) -> RunConfig {
        let spec = SimSpec { r1: 6, r2: 2, r3: 2, n: 15, d: 20, beta, seed, ..Default::default() };
        let (ds, truth) = sample_dataset(&spec).unwrap();
        let [matrix, manifest, _] = write_simulation(&dir.join("sim"), &ds, &truth).unwrap();
        RunConfig {
            matrix,
            manifest,
            out_dir: dir.join("out"),
            seed: 3,
            divisions: 20,
            trials: 100,
            ..Default::default()
        }
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = RunConfig { core: vec![1, 4], alpha: 0.05, stat: StatKind::MaxAbsDiff, ..Default::default() };
        assert_eq!(RunConfig::from_toml_str(&cfg.to_toml()).unwrap(), cfg);
        assert_eq!(RunConfig::from_toml_str("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_key_is_config_error() {
        let err = RunConfig::from_toml_str("alpah = 0.2").unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn overrides_apply() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "alpha = 0.2\nseed = 4\n").unwrap();
        let cfg = RunConfig::load(&path, &["seed=9".into(), "stat=maxabs".into(), "core=[2,3]".into()]).unwrap();
        assert_eq!(cfg.alpha, 0.2);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.stat, StatKind::MaxAbsDiff);
        assert_eq!(cfg.core, vec![2, 3]);
    }

    #[test]
    fn hash_changes_with_content() {
        let a = RunConfig::default();
        let b = RunConfig { seed: 1, ..Default::default() };
        assert_eq!(a.hash(), RunConfig::default().hash());
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn alpha_one_selects_single_vertex() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig { alpha: 1.0, ..sim_config(dir.path(), 1.0, 5) };
        let report = run_pipeline(&cfg).unwrap();
        assert_eq!(report.accepted_pairs, 0);
        assert_eq!(report.selected.len(), 1);
        assert!(report.diagnostic.is_none());
        assert!(!cfg.out_dir.join(DIAGNOSTIC_FILE).exists());
    }

    #[test]
    fn report_round_trips_config() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = sim_config(dir.path(), 1.0, 6);
        let report = run_pipeline(&cfg).unwrap();
        let back: PipelineReport = read_json(&cfg.out_dir.join(REPORT_FILE)).unwrap();
        assert_eq!(back, report);
        assert_eq!(back.config, cfg);
        assert_eq!(back.provenance.config_hash, cfg.hash());
        assert!(cfg.out_dir.join(DIAGNOSTIC_FILE).exists());
    }

    #[test]
    fn missing_input_names_stage_and_path() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig { matrix: dir.path().join("nope.csv"), out_dir: dir.path().join("o"), ..Default::default() };
        let err = run_pipeline(&cfg).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let msg = err.to_string();
        assert!(msg.starts_with("load:") && msg.contains("nope.csv"), "{msg}");
    }
}
