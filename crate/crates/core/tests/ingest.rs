use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use cobs::error::Error;
use cobs::load_dataset;

fn write_inputs(dir: &Path, sizes: &[usize], d: usize) -> (PathBuf, PathBuf) {
    let mut matrix = (0..d).map(|j| format!("g{j}")).collect::<Vec<_>>().join(",") + "\n";
    let mut manifest = String::from("sample_id,partition_id,window\n");
    let mut row = 0usize;
    for (p, &n) in sizes.iter().enumerate() {
        for _ in 0..n {
            let vals: Vec<String> = (0..d).map(|j| format!("{}", ((row * 7 + j * 3) % 11) as f64 - 5.0)).collect();
            matrix += &(vals.join(",") + "\n");
            writeln!(manifest, "{row},brain{p},w{}", p % 4).unwrap();
            row += 1;
        }
    }
    let (m, f) = (dir.join("matrix.csv"), dir.join("manifest.csv"));
    fs::write(&m, matrix).unwrap();
    fs::write(&f, manifest).unwrap();
    (m, f)
}

#[test]
fn threshold_drops_small_partitions() {
    let dir = tempfile::tempdir().unwrap();
    let (m, f) = write_inputs(dir.path(), &[5, 3, 2], 2);
    let ds = load_dataset(&m, &f, 5).unwrap();
    assert_eq!(ds.r(), 1);
    assert_eq!(ds.partition(0).label, "brain0");
    assert_eq!(ds.partition(0).window.as_deref(), Some("w0"));
}

#[test]
fn brainspan_size_profile_keeps_125_of_212() {
    // 125 partitions with 5..=12 samples, 87 with 1..=4.
    let sizes: Vec<usize> = (0..212)
        .map(|p| if p < 125 { 5 + p % 8 } else { 1 + p % 4 })
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let (m, f) = write_inputs(dir.path(), &sizes, 3);
    let ds = load_dataset(&m, &f, 5).unwrap();
    assert_eq!(ds.r(), 125);
    assert_eq!(ds.total_samples(), sizes.iter().filter(|&&n| n >= 5).sum::<usize>());
    for (p, part) in ds.partitions().iter().enumerate() {
        assert_eq!(part.id, p);
        assert!(part.n() >= 5);
    }
}

#[test]
fn missing_row_id_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (m, f) = write_inputs(dir.path(), &[3], 2);
    fs::write(&f, "sample_id,partition_id\n0,a\n1,a\n7,a\n").unwrap();
    let err = load_dataset(&m, &f, 1).unwrap_err();
    assert!(matches!(err, Error::Parse { .. }), "{err}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn non_numeric_cell_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (m, f) = write_inputs(dir.path(), &[2], 2);
    fs::write(&m, "a,b\n1,2\n3,x\n").unwrap();
    assert!(matches!(load_dataset(&m, &f, 1).unwrap_err(), Error::Parse { .. }));
}

#[test]
fn row_count_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (m, f) = write_inputs(dir.path(), &[3], 2);
    fs::write(&f, "sample_id,partition_id\n0,a\n1,a\n").unwrap();
    assert!(matches!(load_dataset(&m, &f, 1).unwrap_err(), Error::DimensionMismatch(_)));
}

#[test]
fn everything_filtered_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let (m, f) = write_inputs(dir.path(), &[2, 3], 2);
    assert!(matches!(load_dataset(&m, &f, 5).unwrap_err(), Error::EmptyDataset { min_samples: 5 }));
}

#[test]
fn loading_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (m, f) = write_inputs(dir.path(), &[6, 7, 5], 4);
    let a = load_dataset(&m, &f, 5).unwrap();
    let b = load_dataset(&m, &f, 5).unwrap();
    assert_eq!(a.to_bytes(), b.to_bytes());
    assert_eq!(a.content_hash(), b.content_hash());
}
