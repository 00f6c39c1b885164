use std::path::Path;
use std::process::{Command, Output};

use fairtensor::experiment::{read_metrics_csv, METRICS_HEADER, OUT_DIR_ENV};

fn fairtensor(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fairtensor"))
        .args(args)
        .env(OUT_DIR_ENV, out)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn first_line(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

const QUICK: [&str; 5] = ["--small", "--epochs", "2", "--inner-steps", "5"];

#[test]
fn counterexample_json() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(&fairtensor(dir.path(), &["counterexample", "--json"]));
    let v: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(v["orthogonality_norm"], 0.0);
    assert_eq!(v["threshold_probe_accuracy"], 1.0);
}

#[test]
fn gen_synth_writes_dataset_dir() {
    let dir = tempfile::tempdir().unwrap();
    ok(&fairtensor(dir.path(), &["gen-synth", "--small", "--seed", "3"]));
    for f in ["X.txt", "S.txt", "labels.txt", "truth/A.txt", "truth/C.txt"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    assert_eq!(first_line(&dir.path().join("X.txt")), "dims: 60 30 30");

    // the directory is itself a dataset
    let out = tempfile::tempdir().unwrap();
    let data = dir.path().to_str().unwrap();
    let mut args = vec!["fit", "--dataset", data, "--method", "bcd"];
    args.extend(&QUICK[1..]);
    ok(&fairtensor(out.path(), &args));
}

#[test]
fn fit_writes_model_trace_metrics_and_audit() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["fit", "--preset", "fig2b", "--method", "khsic", "--lambda", "50", "--lr-a", "0.04"];
    args.extend(QUICK);
    let stdout = ok(&fairtensor(dir.path(), &args));
    assert!(stdout.contains("relative residual"));
    let d = dir.path();
    for f in ["model/A.txt", "model/B.txt", "model/C.txt"] {
        assert!(d.join(f).exists(), "{f} missing");
    }
    assert_eq!(first_line(&d.join("trace.csv")), "epoch,residual_term,penalty_term,objective");
    assert_eq!(std::fs::read_to_string(d.join("trace.csv")).unwrap().lines().count(), 3);
    assert_eq!(first_line(&d.join("audit.csv")), "method,lambda,accuracy,unfairness,majority_floor,n_test");
    let rows = read_metrics_csv(std::fs::File::open(d.join("metrics.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].lambda, 50.0);

    // audit the saved factor again: same split and probe seed, same numbers
    let again = tempfile::tempdir().unwrap();
    let model = d.join("model");
    let args = ["audit", "--model", model.to_str().unwrap(), "--preset", "fig2b", "--small", "--method", "khsic", "--lambda", "50"];
    ok(&fairtensor(again.path(), &args));
    assert_eq!(
        std::fs::read_to_string(again.path().join("audit.csv")).unwrap(),
        std::fs::read_to_string(d.join("audit.csv")).unwrap()
    );
}

#[test]
fn sweep_csv_has_exact_header_and_gnuplot() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["sweep", "--preset", "fig1b", "--seed", "1", "--gnuplot"];
    args.extend(QUICK);
    ok(&fairtensor(dir.path(), &args));
    let csv = dir.path().join("fig1b_sweep.csv");
    let text = std::fs::read_to_string(&csv).unwrap();
    let header = text.lines().find(|l| !l.starts_with('#')).unwrap();
    assert_eq!(header, METRICS_HEADER);
    assert_eq!(
        header,
        "method,lambda,seed,relative_residual,unfairness,normalized_khsic,khsic,hsic,orthogonality_norm,wall_time_seconds"
    );
    let rows = read_metrics_csv(text.as_bytes()).unwrap();
    assert_eq!(rows.len(), 11);
    assert!(rows.iter().all(|r| r.seed == 1));
    assert!(dir.path().join("fig1b_sweep.gp").exists());
}

#[test]
fn compare_json_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["--json", "compare", "--preset", "fig2b", "--seed", "0"];
    args.extend(QUICK);
    let v: serde_json::Value = serde_json::from_str(&ok(&fairtensor(dir.path(), &args))).unwrap();
    let methods: Vec<&str> = v["summary"].as_array().unwrap().iter().map(|s| s["method"].as_str().unwrap()).collect();
    assert_eq!(methods, ["bcd", "fatr", "hsic", "khsic"]);
    assert!(dir.path().join("fig2b_summary.csv").exists());
    assert!(dir.path().join("fig2b_compare.csv").exists());
}

#[test]
fn out_flag_beats_environment() {
    let env_dir = tempfile::tempdir().unwrap();
    let flag_dir = tempfile::tempdir().unwrap();
    ok(&fairtensor(env_dir.path(), &["gen-synth", "--small", "--out", flag_dir.path().to_str().unwrap()]));
    assert!(flag_dir.path().join("X.txt").exists());
    assert!(!env_dir.path().join("X.txt").exists());
}

#[test]
fn config_file_with_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    std::fs::write(
        &cfg,
        r#"
name = "mine"
seeds = [4]

[dataset]
kind = "synthetic"
small = true

[train]
epochs = 50
lr_a = 0.05
lr_bc = 0.3
normalize_residual = true

[[methods]]
method = "hsic"
lambda = 0.005
"#,
    )
    .unwrap();
    let args = ["fit", "--config", cfg.to_str().unwrap(), "--epochs", "1", "--inner-steps", "3"];
    ok(&fairtensor(dir.path(), &args));
    let rows = read_metrics_csv(std::fs::File::open(dir.path().join("metrics.csv")).unwrap()).unwrap();
    assert_eq!((rows[0].seed, rows[0].lambda), (4, 0.005));
    assert_eq!(std::fs::read_to_string(dir.path().join("trace.csv")).unwrap().lines().count(), 2);
}

#[test]
fn bad_input_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = fairtensor(dir.path(), &["fit", "--preset", "nope"]);
    assert_eq!(out.status.code(), Some(2));
    let out = fairtensor(dir.path(), &["fit", "--small", "--epochs", "0"]);
    assert_eq!(out.status.code(), Some(2));
    // clap usage errors
    let out = fairtensor(dir.path(), &["fit", "--method", "svd"]);
    assert_eq!(out.status.code(), Some(2));
    // plain gradient steps blow up at this rate
    let out = fairtensor(dir.path(), &["fit", "--small", "--method", "bcd", "--epochs", "3", "--lr-bc", "50"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}
