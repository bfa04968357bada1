use diffcap::attack::{adaptive_attack, AdaptiveMode, AttackConfig};
use diffcap::harness::config::ExperimentConfig;
use diffcap::harness::dataset::Dataset;
use diffcap::harness::experiment::{run_experiment, Testbed, REPORT_FILE, TIMINGS_FILE};
use diffcap::harness::report::{ExperimentReport, ReportError};
use diffcap::rng::NoiseStream;

fn small(dir: &std::path::Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_toml(
        "data.n_per_class = 20\ndata.calibration_per_class = 20\nattack.adaptive_points = 10\n\
         certify.n_points = 2\ncertify.n_mc = 200\n",
    )
    .unwrap();
    cfg.output_dir = dir.to_path_buf();
    cfg
}

#[test]
fn report_round_trips_and_matches_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    let report = run_experiment(&cfg).unwrap();
    assert_eq!(ExperimentReport::read(&dir.path().join(REPORT_FILE)).unwrap(), report);
    assert!(dir.path().join(TIMINGS_FILE).exists());

    let bed = Testbed::build(&cfg).unwrap();
    let saved = Dataset::load(dir.path(), "test").unwrap();
    assert_eq!(saved.labels, bed.test.labels);
    for (a, b) in saved.xs.iter().zip(&bed.test.xs) {
        // tensors store f32
        assert!(a.linf_distance(b) < 1e-6);
    }
}

#[test]
fn zero_budget_preset_is_the_clean_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let report = run_experiment(&small(dir.path())).unwrap();
    let zero = report.preset(0.0).unwrap();
    assert_eq!(zero.attacked_accuracy, report.clean_accuracy);
    assert_eq!(zero.mean_linf, 0.0);
    for d in &zero.defenses {
        assert!(d.t_stop.is_ordered());
    }
}

#[test]
fn adaptive_attack_is_no_weaker_than_transfer() {
    let dir = tempfile::tempdir().unwrap();
    let report = run_experiment(&small(dir.path())).unwrap();
    let a = report.adaptive.expect("adaptive stage enabled by default");
    assert!(a.adaptive_purified_accuracy <= a.transfer_purified_accuracy);
    assert!(a.undefended_accuracy <= a.adaptive_purified_accuracy);
}

#[test]
fn tampered_report_is_rejected_with_a_path() {
    let dir = tempfile::tempdir().unwrap();
    run_experiment(&small(dir.path())).unwrap();
    let path = dir.path().join(REPORT_FILE);
    let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    v["presets"][1]["defenses"][0]["purified_accuracy"] = serde_json::json!(-3.0);
    match ExperimentReport::from_json(&v.to_string()) {
        Err(ReportError::Schema { path, .. }) => assert_eq!(path, "/presets/1/defenses/0/purified_accuracy"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn seed_changes_the_report() {
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let a = run_experiment(&small(d1.path())).unwrap();
    let mut cfg = small(d2.path());
    cfg.seed = 1;
    let b = run_experiment(&cfg).unwrap();
    assert_ne!(a.presets, b.presets);
}

#[test]
fn single_sample_eot_equals_bpda_through_a_stochastic_purifier() {
    let cfg = ExperimentConfig::from_toml("data.n_per_class = 3").unwrap();
    let bed = Testbed::build(&cfg).unwrap();
    let purifier = bed.diffcap(0.99);
    let attack = AttackConfig { n_steps: 5, ..AttackConfig::default() };
    for (i, (x, &y)) in bed.test.xs.iter().zip(&bed.test.labels).enumerate() {
        let noise = NoiseStream::new(4, i as u64, "attack");
        let a = adaptive_attack(&bed.clf, &purifier, x, y, &attack, AdaptiveMode::Bpda, 1, &noise).unwrap();
        let b = adaptive_attack(&bed.clf, &purifier, x, y, &attack, AdaptiveMode::BpdaEot, 1, &noise).unwrap();
        assert_eq!(a, b);
        let c = adaptive_attack(&bed.clf, &purifier, x, y, &attack, AdaptiveMode::BpdaEot, 4, &noise).unwrap();
        assert!(c.linf_norm <= attack.epsilon + 1e-12);
    }
}

#[test]
fn resample_mode_is_flagged_as_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    let clean = run_experiment(&cfg).unwrap();
    assert!(clean.warnings.is_empty(), "{:?}", clean.warnings);
    cfg.purify.injection_mode = diffcap::purify::InjectionMode::Resample;
    let report = run_experiment(&cfg).unwrap();
    assert!(report.warnings.iter().any(|w| w.contains("resample")), "{:?}", report.warnings);
}

#[test]
fn default_mixture_is_separable_by_prototypes() {
    let cfg = ExperimentConfig::from_toml("data.n_per_class = 500").unwrap();
    let bed = Testbed::build(&cfg).unwrap();
    assert_eq!(bed.test.len(), 1000);
    let acc = bed.accuracy(&bed.test.xs, &bed.test.labels).unwrap();
    let oracle: serde_json::Value = serde_json::from_str(include_str!("data/benchmark_oracle.json")).unwrap();
    assert!(acc >= 99.0);
    assert_eq!(acc, oracle["prototype_accuracy_1000"].as_f64().unwrap());
}

#[test]
fn purifying_clean_inputs_keeps_accuracy() {
    let oracle: serde_json::Value = serde_json::from_str(include_str!("data/benchmark_oracle.json")).unwrap();
    let tol = oracle["zero_budget_purified_tolerance"].as_f64().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg =
        ExperimentConfig::load(&std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/benchmark.toml"))
            .unwrap();
    cfg.output_dir = dir.path().to_path_buf();
    let report = run_experiment(&cfg).unwrap();
    let zero = report.preset(0.0).unwrap();
    for d in &zero.defenses {
        assert!(d.purified_accuracy >= report.clean_accuracy - tol, "{}: {}", d.name, d.purified_accuracy);
    }
}
