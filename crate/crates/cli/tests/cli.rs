use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn diffcap(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_diffcap"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("DIFFCAP_OUTPUT_DIR")
        .output()
        .expect("binary runs")
}

fn stdout_json(o: &Output) -> Value {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).expect("stdout is JSON")
}

fn small_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("small.toml");
    std::fs::write(
        &path,
        "data.n_per_class = 10\ndata.calibration_per_class = 10\nattack.adaptive_points = 4\n\
         certify.n_points = 2\ncertify.n_mc = 200\n",
    )
    .unwrap();
    path
}

#[test]
fn unknown_config_key_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "purify.tua = 0.9\n").unwrap();
    let o = diffcap(&["experiment", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("tua"));
}

#[test]
fn invalid_value_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[schedule]\nbeta_min = 5.0\nbeta_max = 1.0\n").unwrap();
    let o = diffcap(&["experiment", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_config_file_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let o = diffcap(&["experiment", "--config", "/nonexistent/x.toml"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn malformed_input_tensor_is_a_stage_failure() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("x.tensor");
    std::fs::write(&bad, b"not a tensor").unwrap();
    let o = diffcap(&["purify", "--input", bad.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn experiment_writes_a_valid_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("run");
    let v = stdout_json(&diffcap(&["experiment", "--config", cfg.to_str().unwrap()], &out));
    assert!(v.is_object());
    let report = diffcap::harness::report::ExperimentReport::read(&out.join("report.json")).unwrap();
    assert_eq!(report.dataset.n_test, 20);
    assert!(out.join("timings.json").exists());
    for p in &report.presets {
        assert!(p.defense("diffcap").is_some() && p.defense("fixed-t").is_some());
    }
}

#[test]
fn attack_then_purify_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let a = stdout_json(&diffcap(&["attack", "--config", cfg, "--eps", "0.3"], dir.path()));
    assert_eq!(a["n"], 20);
    assert!(a["mean_linf"].as_f64().unwrap() <= 0.3 + 1e-12);
    let adv = a["output"].as_str().unwrap().to_string();
    let p = stdout_json(&diffcap(
        &["purify", "--config", cfg, "--input", &adv, "--reverse", "probability-flow"],
        dir.path(),
    ));
    let records = p["records"].as_array().unwrap();
    assert_eq!(records.len(), 20);
    for r in records {
        let t = r["t_stop"].as_f64().unwrap();
        assert!(t > 0.0 && t <= 1.0);
    }
    let purified = diffcap::harness::tensor::Tensor::load(Path::new(p["output"].as_str().unwrap())).unwrap();
    assert_eq!(purified.shape(), &[20, 16]);
}

#[test]
fn zero_budget_attack_leaves_accuracy_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let a = stdout_json(&diffcap(&["attack", "--config", cfg.to_str().unwrap(), "--eps", "0"], dir.path()));
    assert_eq!(a["clean_accuracy"], a["attacked_accuracy"]);
    assert_eq!(a["mean_linf"].as_f64().unwrap(), 0.0);
}

#[test]
fn theory_check_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let v = stdout_json(&diffcap(&["theory-check", "--n-mc", "200"], dir.path()));
    assert_eq!(v["monitor"]["pass"], true);
    let csv = std::fs::read_to_string(dir.path().join("drift.csv")).unwrap();
    assert!(csv.starts_with("t,estimate,bound"));
    assert_eq!(csv.lines().count(), 18);
}

#[test]
fn certify_reports_one_record_per_point() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let v = stdout_json(&diffcap(
        &["certify", "--config", cfg.to_str().unwrap(), "--eps", "0.05", "--t-grid", "0.01,0.05", "--n-mc", "200"],
        dir.path(),
    ));
    let records = v.as_array().unwrap();
    assert_eq!(records.len(), 2);
    for r in records {
        let est = &r["estimate"];
        assert_eq!(est["t_grid"], serde_json::json!([0.01, 0.05]));
        assert!(est["p1_lower"].as_f64().unwrap() > est["p2_upper"].as_f64().unwrap());
    }
}

#[test]
fn calibrate_from_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let v = stdout_json(&diffcap(&["calibrate", "--config", cfg.to_str().unwrap()], dir.path()));
    let tau = v["tau"].as_f64().unwrap();
    assert!((-1.0..=1.0).contains(&tau));
}
