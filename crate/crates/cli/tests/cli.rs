use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::tempdir;

use s3ribp::io::Provenance;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_s3ribp")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn error_line(out: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().expect("an error line");
    serde_json::from_str(line).unwrap_or_else(|_| panic!("not JSON: {line}"))
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn generate_ibp_matches_expected_feature_count() {
    let dir = tempdir().unwrap();
    let out = dir.path().join("gen");
    ok(&["generate", "--prior", "ibp", "--alpha", "2", "--rows", "100", "--replicates", "400", "--out", s(&out)]);
    let report = json(&out.join("generate.json"));
    let k: Vec<f64> = report["k_plus"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    let mean = k.iter().sum::<f64>() / k.len() as f64;
    let var = k.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k.len() - 1) as f64;
    let se = (var / k.len() as f64).sqrt();
    assert!((mean - 10.375).abs() < 3.0 * se, "mean {mean}, se {se}");
    assert!(out.join("z-0000.csv").exists() && out.join("z-0399.csv").exists());
}

#[test]
fn defaults_are_recorded_in_provenance() {
    let dir = tempdir().unwrap();
    let out = dir.path().join("gen");
    ok(&["generate", "--prior", "3p", "--rows", "10", "--out", s(&out)]);
    let prov = Provenance::read(&out).unwrap();
    let hp = &prov.config.hyper;
    assert_eq!((hp.burn_in, hp.n_samples, hp.k_max), (30_000, 1_000, 50));
    assert_eq!((hp.alpha_b, hp.mu_b, hp.nb_r, hp.nb_p, hp.c), (0.01, 1.0, 1.0, 0.1, 50.0));
    assert!(hp.sigma < 1.0 && hp.sigma > 0.99);
    assert_eq!(prov.command, "generate");
    assert_eq!(prov.code_version, env!("CARGO_PKG_VERSION"));
    assert_eq!(prov.config.output, out);
}

#[test]
fn usage_errors_exit_two_without_output() {
    let dir = tempdir().unwrap();
    let out = dir.path().join("never");
    let bad_flag = run(&["fit", "--data", "x.csv", "--bogus", "--out", s(&out)]);
    assert_eq!(bad_flag.status.code(), Some(2));
    assert_eq!(error_line(&bad_flag)["error"], "usage");

    let bad_value = run(&["eval", "--data", "x.csv", "--holdout", "1.5", "--out", s(&out)]);
    assert_eq!(bad_value.status.code(), Some(2));
    assert!(error_line(&bad_value)["message"].as_str().unwrap().contains("holdout"));

    let config = dir.path().join("run.toml");
    fs::write(&config, "[hyper]\nsigma = 0.5\nc = -0.7\n").unwrap();
    let inconsistent = run(&["fit", "--data", "x.csv", "--config", s(&config), "--out", s(&out)]);
    assert_eq!(inconsistent.status.code(), Some(2));

    let missing = run(&["fit", "--out", s(&out)]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn runtime_errors_exit_one_with_a_json_line() {
    let dir = tempdir().unwrap();
    let data = dir.path().join("bad.csv");
    fs::write(&data, "id,a,b\nx,1,2\ny,3,-4\n").unwrap();
    let out = dir.path().join("out");
    let res = run(&["fit", "--data", s(&data), "--out", s(&out), "--burn-in", "5", "--samples", "5"]);
    assert_eq!(res.status.code(), Some(1));
    let line = error_line(&res);
    assert_eq!(line["error"], "parse");
    assert!(line["message"].as_str().unwrap().contains(":3:"));
    assert!(!out.join("summary.json").exists());
}

fn generated_counts(dir: &Path) -> std::path::PathBuf {
    let gen = dir.join("gen");
    ok(&[
        "generate",
        "--prior",
        "3r",
        "--rows",
        "24",
        "--cols",
        "12",
        "--k-max",
        "5",
        "--nb-p",
        "0.5",
        "--alpha-b",
        "1",
        "--mu-b",
        "2",
        "--seed",
        "3",
        "--out",
        s(&gen),
    ]);
    gen.join("x.csv")
}

#[test]
fn resume_reproduces_an_uninterrupted_fit() {
    let dir = tempdir().unwrap();
    let data = generated_counts(dir.path());
    let full = dir.path().join("full");
    let fit = |out: &Path| {
        ok(&[
            "fit",
            "--data",
            s(&data),
            "--k-max",
            "5",
            "--burn-in",
            "120",
            "--samples",
            "60",
            "--seed",
            "9",
            "--checkpoint-every",
            "100",
            "--out",
            s(out),
        ])
    };
    fit(&full);
    let checkpoint = full.join("checkpoint.json");
    assert_eq!(json(&checkpoint)["iteration"], 100);
    let resumed = dir.path().join("resumed");
    ok(&["resume", "--checkpoint", s(&checkpoint), "--data", s(&data), "--out", s(&resumed)]);
    assert_eq!(fs::read(full.join("summary.json")).unwrap(), fs::read(resumed.join("summary.json")).unwrap());
    assert_eq!(Provenance::read(&resumed).unwrap().config.hyper, Provenance::read(&full).unwrap().config.hyper);

    let other = dir.path().join("other.csv");
    fs::write(&other, fs::read_to_string(&data).unwrap().replacen(",0", ",7", 1)).unwrap();
    let rejected = run(&["resume", "--checkpoint", s(&checkpoint), "--data", s(&other), "--out", s(&resumed)]);
    assert_eq!(rejected.status.code(), Some(1));
    assert_eq!(error_line(&rejected)["error"], "checkpoint");
}

#[test]
fn downstream_commands_consume_a_fit() {
    let dir = tempdir().unwrap();
    let data = generated_counts(dir.path());
    let fit = dir.path().join("fit");
    let hyper = ["--k-max", "5", "--burn-in", "100", "--samples", "40"];
    let with = |cmd: &[&str]| -> Vec<String> { cmd.iter().chain(&hyper).map(|s| s.to_string()).collect() };
    let args = with(&["fit", "--data", s(&data), "--out", s(&fit)]);
    ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    let summary = fit.join("summary.json");

    let qq = dir.path().join("qq");
    ok(&["qq", "--summary", s(&summary), "--data", s(&data), "--qq-draws", "5", "--out", s(&qq)]);
    let table = fs::read_to_string(qq.join("qq_model.tsv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 24);

    let topics = dir.path().join("topics");
    let printed = ok(&["topics", "--summary", s(&summary), "--data", s(&data), "--top-m", "3", "--out", s(&topics)]);
    assert!(printed.lines().all(|l| l.starts_with('F')));
    assert!(fs::read_to_string(topics.join("topics.tsv")).unwrap().starts_with("feature\trank\tlabel\tweight\n"));

    let meta = dir.path().join("meta");
    let args = with(&["meta", "--summary", s(&summary), "--out", s(&meta)]);
    ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert!(meta.join("meta_summary.json").exists() && meta.join("features.csv").exists());

    let eval = dir.path().join("eval");
    let args = with(&["eval", "--data", s(&data), "--folds", "2", "--out", s(&eval)]);
    ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    let report = json(&eval.join("eval.json"));
    assert_eq!(report["n_folds"], 2);
    assert_eq!(report["folds"][0]["held_out"], 29);
    assert_eq!(Provenance::read(&eval).unwrap().config.folds, 2);
}
