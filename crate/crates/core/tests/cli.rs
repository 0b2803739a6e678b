use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cobs::eval::{replicate_seed, roc_sweep, StudySettings, SweepOptions};
use cobs::simgen::{MarginalFamily, SimSpec};

fn cobs(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cobs"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = cobs(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn simulate(dir: &Path, seed: u64) {
    let seed = seed.to_string();
    ok(dir, &["simulate", "--r1", "6", "--r2", "2", "--r3", "2", "--d", "20", "--beta", "1", "--seed", &seed, "--out-prefix", "sim"]);
}

fn write_config(dir: &Path, out_dir: &str) -> PathBuf {
    let path = dir.join(format!("{out_dir}.toml"));
    let text = format!(
        "matrix = \"sim_matrix.csv\"\nmanifest = \"sim_manifest.csv\"\nout_dir = \"{out_dir}\"\nseed = 11\ntrials = 100\ndivisions = 40\n"
    );
    fs::write(&path, text).unwrap();
    path
}

fn artifacts(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn missing_input_exits_2_with_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = cobs(dir.path(), &["stepdown", "--matrix", "absent_matrix.csv", "--manifest", "absent_manifest.csv"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent_matrix.csv"));

    let out = cobs(dir.path(), &["run", "--config", "nowhere.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere.toml"));
}

#[test]
fn bad_config_exits_2_and_computation_error_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), 1);
    let cfg = write_config(dir.path(), "out");
    let cfg = cfg.to_str().unwrap();
    assert_eq!(cobs(dir.path(), &["run", "--config", cfg, "--set", "colour=1"]).status.code(), Some(2));
    assert_eq!(cobs(dir.path(), &["run", "--config", cfg, "--set", "alpha=1.5"]).status.code(), Some(2));
    let out = cobs(dir.path(), &["run", "--config", cfg, "--set", "core=[99]"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("select:"));
}

#[test]
fn select_matches_pipeline_selection() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), 2);
    let cfg = write_config(dir.path(), "out");
    ok(dir.path(), &["run", "--config", cfg.to_str().unwrap()]);
    ok(dir.path(), &["select", "--stepdown", "out/stepdown.json", "--out", "sel.json"]);
    assert_eq!(fs::read(dir.path().join("sel.json")).unwrap(), fs::read(dir.path().join("out/selection.json")).unwrap());

    let sel: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("sel.json")).unwrap()).unwrap();
    let ids: Vec<u64> = sel["selected"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).collect();
    let hits = ids.iter().filter(|&&p| p < 6).count();
    assert!(hits >= 5, "selection {ids:?} misses group 1");
}

#[test]
fn pipeline_is_byte_identical_across_runs_and_threads() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), 3);
    let cfg = write_config(dir.path(), "out");
    let cfg = cfg.to_str().unwrap();
    ok(dir.path(), &["run", "--config", cfg, "--threads", "1"]);
    let first = artifacts(&dir.path().join("out"));
    assert_eq!(first.len(), 5);
    ok(dir.path(), &["run", "--config", cfg, "--threads", "1"]);
    assert_eq!(artifacts(&dir.path().join("out")), first);
    ok(dir.path(), &["run", "--config", cfg, "--threads", "8"]);
    assert_eq!(artifacts(&dir.path().join("out")), first);
}

#[test]
fn simulate_stepdown_evaluate_reproduces_sweep_row() {
    let dir = tempfile::tempdir().unwrap();
    let (seed, k) = (21u64, 1usize);
    let rep = replicate_seed(seed, k);
    let template = SimSpec { r1: 6, r2: 2, r3: 2, n: 15, d: 20, marginals: MarginalFamily::Bimodal, ..Default::default() };
    let settings = StudySettings { trials: 100, ..Default::default() };
    let sweep = roc_sweep(&template, &[1.0], &[0.1], 2, seed, &settings, SweepOptions { bonferroni: false, selection: true }).unwrap();
    let row = sweep.rows.iter().find(|r| r.replicate == k).unwrap();

    let rep = rep.to_string();
    ok(dir.path(), &[
        "simulate", "--r1", "6", "--r2", "2", "--r3", "2", "--d", "20", "--beta", "1",
        "--marginals", "bimodal", "--seed", &rep, "--out-prefix", "sim",
    ]);
    ok(dir.path(), &[
        "stepdown", "--matrix", "sim_matrix.csv", "--manifest", "sim_manifest.csv",
        "--alpha", "0.1", "--trials", "100", "--seed", &rep, "--out", "sd.json",
    ]);
    ok(dir.path(), &["select", "--stepdown", "sd.json", "--out", "sel.json"]);
    let rates: serde_json::Value = serde_json::from_str(&ok(dir.path(), &[
        "evaluate", "rates", "--stepdown", "sd.json", "--selection", "sel.json", "--r1", "6", "--r2", "2", "--r3", "2",
    ]))
    .unwrap();
    assert_eq!(rates["hypothesis"]["tpr"].as_f64().unwrap(), row.hypothesis.tpr);
    assert_eq!(rates["hypothesis"]["fpr"].as_f64().unwrap(), row.hypothesis.fpr);
    let part = row.partition.unwrap();
    assert_eq!(rates["partition"]["tpr"].as_f64().unwrap(), part.tpr);
    assert_eq!(rates["partition"]["fpr"].as_f64().unwrap(), part.fpr);
}

#[test]
fn rival_methods_and_diagnose_run() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), 4);
    ok(dir.path(), &["stepdown", "--matrix", "sim_matrix.csv", "--manifest", "sim_manifest.csv", "--trials", "100", "--out", "sd.json"]);
    for method in ["spectral", "localsearch", "densesplit"] {
        let text = ok(dir.path(), &["select", "--stepdown", "sd.json", "--method", method]);
        assert!(text.contains(&format!("\"method\": \"{method}\"")));
    }
    ok(dir.path(), &[
        "diagnose", "--matrix", "sim_matrix.csv", "--manifest", "sim_manifest.csv",
        "--partitions", "0,1,2,3", "--divisions", "20", "--trials", "50", "--out", "qq.csv",
    ]);
    let qq = fs::read_to_string(dir.path().join("qq.csv")).unwrap();
    assert!(qq.starts_with("uniform,empirical\n"));
    assert_eq!(qq.lines().count(), 21);
    let pair = ok(dir.path(), &["test-pair", "--matrix", "sim_matrix.csv", "--manifest", "sim_manifest.csv", "--a", "0", "--b", "7", "--trials", "50"]);
    assert!(pair.contains("\"pvalue\""));
}
