//! File-level workflows through the `tvselect` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tvselect::artifact::FitArtifact;
use tvselect::simulate::{generate, Scenario, ScenarioSpec};
use tvselect::write_long_csv;

fn tvselect(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tvselect")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = tvselect(args);
    assert!(
        out.status.success(),
        "tvselect {args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> String {
    p.to_str().unwrap().to_string()
}

fn dataset(dir: &Path, scenario: Scenario, seed: u64) -> PathBuf {
    let spec = ScenarioSpec::new(scenario, 40, 5, 6).with_sparsity(2, 2).with_seed(seed);
    let path = dir.join(format!("{scenario}_{seed}.csv"));
    write_long_csv(&generate(&spec).unwrap(), &path).unwrap();
    path
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.unwrap().iter().map(String::from).collect())
        .collect();
    (header, rows)
}

fn round_trip(demean: bool) {
    let tmp = tempfile::tempdir().unwrap();
    // time-varying covariates survive within-subject de-meaning
    let data = dataset(tmp.path(), Scenario::E, 1);
    let fit_dir = tmp.path().join("fit");
    let pred_dir = tmp.path().join("pred");
    ok(&[
        "fit", "--data", &s(&data), "--out", &s(&fit_dir), "--lambda1", "0.01", "--lambda2", "0.001", "--demean",
        &demean.to_string(),
    ]);
    ok(&["predict", "--fit", &s(&fit_dir.join("fit.json")), "--data", &s(&data), "--out", &s(&pred_dir)]);

    let (_, fitted) = read_csv(&fit_dir.join("fitted.csv"));
    let (header, preds) = read_csv(&pred_dir.join("predictions.csv"));
    assert_eq!(header, ["row", "subject", "time", "prediction", "response_scale", "error"]);
    assert_eq!(fitted.len(), preds.len());
    // the generated file is already in subject/time order
    let mut worst: f64 = 0.0;
    for (f, p) in fitted.iter().zip(&preds) {
        assert_eq!(f[0], p[1]);
        let a: f64 = f[2].parse().unwrap();
        let b: f64 = p[3].parse().unwrap();
        worst = worst.max((a - b).abs());
        assert!(p[5].is_empty());
    }
    assert!(worst < 1e-10, "max difference {worst:e}");
}

#[test]
fn fit_then_predict_reproduces_fitted_values() {
    round_trip(true);
    round_trip(false);
}

#[test]
fn missing_input_exits_with_usage_code() {
    let out = tvselect(&["fit", "--data", "/no/such/input.csv", "--out", "/tmp/unused", "--lambda1", "1", "--lambda2", "1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/no/such/input.csv"));

    let out = tvselect(&["fit", "--bogus-flag"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn penalty_above_lambda1_max_gives_empty_vary_set() {
    let tmp = tempfile::tempdir().unwrap();
    let data = dataset(tmp.path(), Scenario::A, 2);
    let dir = tmp.path().join("fit");
    ok(&[
        "fit", "--data", &s(&data), "--out", &s(&dir), "--lambda1", "1000", "--lambda2", "0.01", "--demean", "false",
    ]);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("partition.json")).unwrap()).unwrap();
    assert_eq!(report["time_varying"].as_array().unwrap().len(), 0);
    let (header, rows) = read_csv(&dir.join("curves.csv"));
    assert_eq!(header, ["k", "t", "beta_hat"]);
    assert_eq!(rows.len(), 6 * 200);
}

#[test]
fn classify_with_zero_threshold_marks_nonvarying_as_constant() {
    let tmp = tempfile::tempdir().unwrap();
    let data = dataset(tmp.path(), Scenario::A, 3);
    let dir = tmp.path().join("fit");
    ok(&[
        "fit", "--data", &s(&data), "--out", &s(&dir), "--lambda1", "1000", "--lambda2", "0.01", "--demean", "false",
    ]);
    let art = FitArtifact::load(dir.join("fit.json")).unwrap();
    assert!(art.theta.iter().flatten().all(|&v| v == 0.0));
    assert!(art.mu.iter().all(|&m| m != 0.0));
    let out = tmp.path().join("cls");
    ok(&["classify", "--fit", &s(&dir.join("fit.json")), "--threshold-multiplier", "0", "--out", &s(&out)]);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("partition.json")).unwrap()).unwrap();
    assert_eq!(report["constant"].as_array().unwrap().len(), 6);
    assert_eq!(report["threshold_used"].as_f64(), Some(0.0));
}

#[test]
fn out_of_range_time_is_reported_per_row() {
    let tmp = tempfile::tempdir().unwrap();
    let data = dataset(tmp.path(), Scenario::A, 4);
    let dir = tmp.path().join("fit");
    ok(&["fit", "--data", &s(&data), "--out", &s(&dir), "--lambda1", "0.05", "--lambda2", "0.01", "--demean", "false"]);
    let new = tmp.path().join("new.csv");
    std::fs::write(&new, "subject,time,x1,x2,x3,x4,x5,x6\na,0.5,1,0,0,0,0,0\na,7.5,1,0,0,0,0,0\nb,0.1,0,1,0,0,0,0\n").unwrap();
    let pred = tmp.path().join("pred");
    let out = ok(&["predict", "--fit", &s(&dir.join("fit.json")), "--data", &s(&new), "--out", &s(&pred)]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("1 of 3 rows"));
    let (_, rows) = read_csv(&pred.join("predictions.csv"));
    assert!(rows[0][5].is_empty() && !rows[0][3].is_empty());
    assert!(rows[1][3].is_empty() && rows[1][5].contains("outside"));
    assert_eq!(rows[1][0], "2");

    let wrong = tmp.path().join("wrong.csv");
    std::fs::write(&wrong, "subject,time,x1,x2\na,0.5,1,0\n").unwrap();
    let out = tvselect(&["predict", "--fit", &s(&dir.join("fit.json")), "--data", &s(&wrong), "--out", &s(&pred)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("artifact mismatch"));
}

#[test]
fn tune_surface_minimum_matches_best_pair() {
    let tmp = tempfile::tempdir().unwrap();
    let data = dataset(tmp.path(), Scenario::A, 5);
    for criterion in ["ebic", "cv"] {
        let dir = tmp.path().join(criterion);
        ok(&[
            "tune", "--data", &s(&data), "--out", &s(&dir), "--criterion", criterion, "--demean", "false",
            "--n-lambda1", "8", "--n-lambda2", "3",
        ]);
        let (header, rows) = read_csv(&dir.join("surface.csv"));
        assert_eq!(header, ["lambda1", "lambda2", "criterion"]);
        assert_eq!(rows.len(), 24);
        let parsed: Vec<[f64; 3]> = rows
            .iter()
            .map(|r| [r[0].parse().unwrap(), r[1].parse().unwrap(), r[2].parse().unwrap()])
            .collect();
        let min = parsed.iter().map(|r| r[2]).fold(f64::INFINITY, f64::min);
        let art = FitArtifact::load(dir.join("fit.json")).unwrap();
        let at_best = parsed
            .iter()
            .find(|r| r[0] == art.penalty.lambda1 && r[1] == art.penalty.lambda2)
            .expect("best pair is on the surface");
        assert_eq!(at_best[2], min);
    }
}

#[test]
fn simulate_writes_table_and_echo() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("sim");
    let out = ok(&[
        "simulate", "--scenario", "F", "--amplitude", "1.0", "--n-subjects", "30", "--n-obs", "4", "--p", "6",
        "--s-v", "2", "--s-c", "2", "--replications", "2", "--n-test", "30", "--out", &s(&dir),
    ]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("amplitude 0.5"));
    assert!(String::from_utf8_lossy(&out.stdout).contains("TV-Select"));
    let echo: toml::Table = std::fs::read_to_string(dir.join("config.toml")).unwrap().parse().unwrap();
    assert_eq!(echo["amplitude"].as_float(), Some(0.5));
    assert_eq!(echo["command"].as_str(), Some("simulate"));

    let (header, rows) = read_csv(&dir.join("metrics.csv"));
    assert_eq!(header, ["scenario", "config", "method", "metric", "mean", "se"]);
    // 4 methods x (7 metrics + Stab + MSPE)
    assert_eq!(rows.len(), 36);
    for r in &rows {
        assert_eq!(r[0], "F");
        assert_eq!(r[1], "(30,4,6)");
        assert!(r[4].parse::<f64>().is_ok());
    }
}

#[test]
fn config_file_reproduces_run_and_overrides_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let data = dataset(tmp.path(), Scenario::A, 6);
    let first = tmp.path().join("first");
    ok(&["fit", "--data", &s(&data), "--out", &s(&first), "--lambda1", "0.05", "--lambda2", "0.01", "--demean", "false"]);

    // rerun from the echo alone, into the same directory
    let echo = tmp.path().join("echo.toml");
    std::fs::copy(first.join("config.toml"), &echo).unwrap();
    let before = std::fs::read(first.join("fit.json")).unwrap();
    ok(&["fit", "--config", &s(&echo)]);
    assert_eq!(std::fs::read(first.join("fit.json")).unwrap(), before);

    // a conflicting flag loses to the file, with a warning
    let out = ok(&["fit", "--config", &s(&echo), "--lambda1", "0.5"]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));
    let art = FitArtifact::load(first.join("fit.json")).unwrap();
    assert_eq!(art.penalty.lambda1, 0.05);

    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "lamda1 = 0.1\n").unwrap();
    let out = tvselect(&["fit", "--config", &s(&bad)]);
    assert_eq!(out.status.code(), Some(2));
}
