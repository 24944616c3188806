use std::fmt::Write as _;
use std::fs;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::tempdir;

use s3ribp::io::{load_counts, make_splits, save_counts, CountFormat, Preprocess, RunConfig};
use s3ribp::CountMatrix;

#[test]
fn trade_shaped_matrix_summary() {
    let (n_rows, n_cols) = (126, 744);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut text = String::from("country");
    for d in 0..n_cols {
        write!(text, ",p{d:04}").unwrap();
    }
    text.push('\n');
    for n in 0..n_rows {
        write!(text, "c{n:03}").unwrap();
        for _ in 0..n_cols {
            let x = if rng.random_bool(0.17) { rng.random_range(1..40u64) } else { 0 };
            write!(text, ",{x}").unwrap();
        }
        text.push('\n');
    }
    let dir = tempdir().unwrap();
    let path = dir.path().join("trade.csv");
    fs::write(&path, text).unwrap();
    let data = load_counts(&path, CountFormat::Dense, Preprocess::None).unwrap();
    assert_eq!((data.n_rows(), data.n_cols()), (n_rows, n_cols));
    let nnz = data.nnz() as f64;
    assert!((nnz - 0.17 * (n_rows * n_cols) as f64).abs() < 600.0, "nnz {nnz}");
    assert!((data.density() - 0.17).abs() < 0.01);
    assert!((data.density() + data.sparsity() - 1.0).abs() < 1e-12);
    assert_eq!(data.row_labels()[125], "c125");
}

#[test]
fn quoted_labels_survive_a_round_trip() {
    let mut data = CountMatrix::new(
        vec!["Korea, Rep.".into(), "Côte d'Ivoire".into()],
        vec!["\"crude\" oil".into(), "fish, fresh".into(), "plain".into()],
    )
    .unwrap();
    data.set(0, 1, 4).unwrap();
    data.set(1, 0, 9).unwrap();
    let dir = tempdir().unwrap();
    for (name, format) in [("a.csv", CountFormat::Dense), ("b.tsv", CountFormat::Triplet)] {
        let path = dir.path().join(name);
        save_counts(&data, &path, format).unwrap();
        let back = load_counts(&path, format, Preprocess::None).unwrap();
        assert_eq!(back, data, "{name}");
    }
}

#[test]
fn rca_binary_marks_revealed_advantage() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("raw.csv");
    fs::write(&path, "country,a,b\nx,90.5,10\ny,10,90\n").unwrap();
    let data = load_counts(&path, CountFormat::Dense, Preprocess::RcaBinary).unwrap();
    assert_eq!(data.to_dense().into_raw_vec_and_offset().0, vec![1, 0, 0, 1]);
    assert!(load_counts(&path, CountFormat::Dense, Preprocess::None).is_err());
}

#[test]
fn folds_are_distinct_and_reproducible() {
    let data = CountMatrix::with_default_labels(30, 20).unwrap();
    let a = make_splits(&data, 0.1, 5, 9).unwrap();
    let b = make_splits(&data, 0.1, 5, 9).unwrap();
    assert_eq!(a, b);
    for m in &a {
        assert_eq!(m.len(), 60);
    }
    assert_ne!(a[0], a[1]);
    assert_ne!(make_splits(&data, 0.1, 1, 10).unwrap()[0], a[0]);
}

#[test]
fn config_file_overrides_defaults_and_reports_bad_keys() {
    let dir = tempdir().unwrap();
    let good = dir.path().join("run.toml");
    fs::write(&good, "folds = 3\n[hyper]\nk_max = 12\nsigma = 0.25\n").unwrap();
    let cfg = RunConfig::load(&good).unwrap();
    assert_eq!(cfg.folds, 3);
    assert_eq!(cfg.hyper.k_max, 12);
    assert_eq!(cfg.hyper.c, RunConfig::default().hyper.c);
    cfg.validate().unwrap();

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "folds = 3\n\n[hyper]\nkmax = 12\n").unwrap();
    let msg = RunConfig::load(&bad).unwrap_err().to_string();
    assert!(msg.contains(":4:"), "{msg}");
}
