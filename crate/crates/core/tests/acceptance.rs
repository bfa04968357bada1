//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Run with `cargo test -p diffcap-core --test acceptance`.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde_json::Value;

use diffcap::calibrate::ks_two_sample;
use diffcap::certify::{compute_certificate, estimate_class_probs, verify_certificate};
use diffcap::embed::{CosineClassifier, LinearEncoder, PrototypeSet};
use diffcap::harness::config::ExperimentConfig;
use diffcap::harness::experiment::{run_experiment, theory_check, Testbed, REPORT_FILE};
use diffcap::rng::NoiseStream;
use diffcap::schedule::{alpha_by_quadrature, LinearSchedule};
use diffcap::sde::{
    forward_sample, gmm_marginal, reverse_integrate, transition_step, GmmDistribution, GmmScore, ReverseMode,
    StateVector,
};
use diffcap::theory::Coupling;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn reference_schedule() -> LinearSchedule {
    LinearSchedule::new(0.1, 20.0).unwrap()
}

fn ensure(ok: bool, msg: String) -> Outcome {
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn within(elapsed: Duration, limit_s: f64, detail: String) -> Outcome {
    let s = elapsed.as_secs_f64();
    ensure(s < limit_s, format!("{detail}; {s:.2}s (limit {limit_s}s)"))
}

fn mean_var(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64, usize) {
    let n = xs.clone().count();
    let mean = xs.clone().sum::<f64>() / n as f64;
    let var = xs.map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var, n)
}

/// z-scores of the difference in means and in variances of two samples.
fn moment_z(a: &[f64], b: &[f64]) -> (f64, f64) {
    let (ma, va, na) = mean_var(a.iter().copied());
    let (mb, vb, nb) = mean_var(b.iter().copied());
    let se_mean = (va / na as f64 + vb / nb as f64).sqrt();
    let se_var = (2.0 * va * va / (na - 1) as f64 + 2.0 * vb * vb / (nb - 1) as f64).sqrt();
    ((ma - mb).abs() / se_mean, (va - vb).abs() / se_var)
}

fn schedule_exactness() -> Outcome {
    let start = Instant::now();
    let s = reference_schedule();
    let mut worst = 0.0f64;
    for i in 0..1001 {
        let t = i as f64 / 1000.0;
        let closed = s.alpha(t).map_err(|e| e.to_string())?;
        let quad = alpha_by_quadrature(&s, t, 1e-13).map_err(|e| e.to_string())?;
        worst = worst.max((closed - quad).abs());
    }
    let detail = format!("max |closed - quadrature| = {worst:.2e} on 1001 points");
    ensure(worst < 1e-8, detail.clone())?;
    within(start.elapsed(), 1.0, detail)
}

fn monitor_decreasing() -> Outcome {
    let start = Instant::now();
    let s = reference_schedule();
    let n = 10_000;
    let (lo, hi) = (1e-3, 1.0 - 1e-3);
    let (b0, db) = (s.beta_min(), s.beta_max() - s.beta_min());
    let mut prev = f64::INFINITY;
    let mut strictly = true;
    let mut max_g = f64::NEG_INFINITY;
    for i in 0..n {
        let t = lo + (hi - lo) * i as f64 / (n - 1) as f64;
        let f = s.monitor_f(t).map_err(|e| e.to_string())?;
        strictly &= f < prev;
        prev = f;
        let beta = b0 + db * t;
        let one_minus_alpha = -(-(b0 * t + 0.5 * db * t * t)).exp_m1();
        let g = db / beta - beta / (2.0 * one_minus_alpha);
        max_g = max_g.max(g);
    }
    let lib = diffcap::theory::monitor_decreasing_check(&s, n).map_err(|e| e.to_string())?;
    let detail = format!("strictly decreasing = {strictly}, max g(t) = {max_g:.4}, library check = {}", lib.pass);
    ensure(strictly && max_g < 0.0 && lib.pass, detail.clone())?;
    within(start.elapsed(), 1.0, detail)
}

fn score_oracle() -> Outcome {
    let s = reference_schedule();
    let p0 = GmmDistribution::new(
        vec![0.3, 0.7],
        vec![vec![0.8, -0.2, 0.4], vec![-0.5, 0.6, -0.1]],
        vec![vec![0.04, 0.09, 0.02], vec![0.05, 0.01, 0.08]],
    )
    .map_err(|e| e.to_string())?;
    let mut g = NoiseStream::new(3, 0, "acceptance/score").source();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let t = g.uniform(0.01, 1.0);
        let x: Vec<f64> = (0..3).map(|_| g.uniform(-1.5, 1.5)).collect();
        let pt = gmm_marginal(&p0, t, &s).map_err(|e| e.to_string())?;
        let score = diffcap::sde::analytic_score(&p0, &x, t, &s).map_err(|e| e.to_string())?;
        let mut err = 0.0;
        for i in 0..3 {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[i] += h;
            xm[i] -= h;
            let fd = (pt.log_density(&xp).unwrap() - pt.log_density(&xm).unwrap()) / (2.0 * h);
            err += (fd - score[i]).powi(2);
        }
        let norm = score.iter().map(|v| v * v).sum::<f64>().sqrt();
        worst = worst.max(err.sqrt() / norm);
    }
    let std_normal = GmmDistribution::isotropic(vec![vec![0.0; 3]], 1.0).map_err(|e| e.to_string())?;
    let mut worst_gauss = 0.0f64;
    for i in 0..=100 {
        let t = i as f64 / 100.0;
        let x: Vec<f64> = (0..3).map(|_| g.uniform(-3.0, 3.0)).collect();
        let score = diffcap::sde::analytic_score(&std_normal, &x, t, &s).map_err(|e| e.to_string())?;
        for (si, xi) in score.iter().zip(&x) {
            worst_gauss = worst_gauss.max((si + xi).abs());
        }
    }
    ensure(
        worst < 1e-5 && worst_gauss < 1e-10,
        format!("max rel. err vs finite differences = {worst:.2e}; standard-normal |score + x| = {worst_gauss:.1e}"),
    )
}

fn forward_consistency() -> Outcome {
    let s = reference_schedule();
    let x0 = StateVector::new(vec![0.5, -0.3, 0.8, 0.0]).unwrap();
    let n = 200_000;
    let times = [0.0, 0.1, 0.2, 0.3];
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let direct = forward_sample(&x0, 0.3, &s, &NoiseStream::new(11, i, "acceptance/direct")).unwrap();
            let stream = NoiseStream::new(11, i, "acceptance/composed");
            let mut x = x0.clone();
            for (k, w) in times.windows(2).enumerate() {
                x = transition_step(&x, w[0], w[1] - w[0], &s, &stream.substream(k as u64, "step")).unwrap();
            }
            (direct.into_inner(), x.into_inner())
        })
        .collect();
    let (mut zm, mut zv) = (0.0f64, 0.0f64);
    for c in 0..x0.dim() {
        let a: Vec<f64> = pairs.iter().map(|p| p.0[c]).collect();
        let b: Vec<f64> = pairs.iter().map(|p| p.1[c]).collect();
        let (m, v) = moment_z(&a, &b);
        zm = zm.max(m);
        zv = zv.max(v);
    }
    ensure(zm < 4.0 && zv < 4.0, format!("max |z| mean = {zm:.2}, variance = {zv:.2} (limit 4) at 2e5 samples"))
}

fn reverse_round_trip() -> Outcome {
    let start = Instant::now();
    let s = reference_schedule();
    let p0 = GmmDistribution::new(
        vec![0.4, 0.6],
        vec![vec![2.0, 2.0], vec![-2.0, -2.0]],
        vec![vec![0.25, 0.16], vec![0.09, 0.25]],
    )
    .map_err(|e| e.to_string())?;
    let score = GmmScore { p0: p0.clone(), schedule: s };
    let n = 10_000u64;
    let out: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let stream = NoiseStream::new(5, i, "acceptance/round-trip");
            let (x, _) = p0.sample(&mut stream.substream(0, "data").source());
            let xt = forward_sample(&StateVector::new(x).unwrap(), 0.3, &s, &stream.substream(0, "forward")).unwrap();
            reverse_integrate(&xt, 0.3, &s, &score, 300, ReverseMode::Stochastic, &stream.substream(0, "reverse"))
                .unwrap()
                .into_inner()
        })
        .collect();
    let mut worst: f64 = 0.0;
    for (k, (mean, var)) in p0.means().iter().zip(p0.vars()).enumerate() {
        let members: Vec<&Vec<f64>> = out
            .iter()
            .filter(|x| {
                let d = |m: &Vec<f64>| x.iter().zip(m).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                p0.means().iter().enumerate().min_by(|a, b| d(a.1).total_cmp(&d(b.1))).unwrap().0 == k
            })
            .collect();
        let nk = members.len() as f64;
        for c in 0..mean.len() {
            let (m, v, _) = mean_var(members.iter().map(|x| x[c]));
            worst = worst.max((m - mean[c]).abs() / (var[c] / nk).sqrt());
            worst = worst.max((v - var[c]).abs() / (var[c] * (2.0 / (nk - 1.0)).sqrt()));
        }
    }
    let detail = format!("max |z| over component means/variances = {worst:.2} (limit 4), 1e4 trajectories");
    ensure(worst < 4.0, detail.clone())?;
    within(start.elapsed(), 60.0, detail)
}

fn oracle() -> Value {
    let text = std::fs::read_to_string(root().join("crates/core/tests/data/benchmark_oracle.json")).unwrap();
    serde_json::from_str(&text).unwrap()
}

fn worked_certificate() -> Outcome {
    let o = &oracle()["certificate"];
    let s = reference_schedule();
    let mut worst = 0.0f64;
    let mut gate_ok = true;
    for (eps, key) in [(0.5, "eps_0.5"), (0.1, "eps_0.1")] {
        let c = compute_certificate(&s, eps, 0.9, 0.1).map_err(|e| e.to_string())?;
        worst = worst.max((c.m - o[key]["M"].as_f64().unwrap()).abs());
        worst = worst.max((c.t_min - o[key]["t_min"].as_f64().unwrap()).abs());
        worst = worst.max((c.quantile_gap - o["quantile_gap"].as_f64().unwrap()).abs());
        gate_ok &= c.valid == o[key]["valid"].as_bool().unwrap() && c.valid == (s.beta_min() >= c.m);
    }
    ensure(
        worst < 1e-6 && gate_ok,
        format!("max |diff| vs 50-digit oracle = {worst:.1e}; validity gate correct = {gate_ok}"),
    )
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2)
}

fn certificate_soundness() -> Outcome {
    let s = reference_schedule();
    let enc = LinearEncoder::from_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let protos = PrototypeSet::new(vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let clf = CosineClassifier::new(enc, protos).unwrap();
    // class 0 wins iff x1 - x0 < 0; the boundary normal is w = (1, -1) / √2
    let x = StateVector::new(vec![0.3, -0.3]).unwrap();
    let toward: Vec<f64> = vec![-std::f64::consts::FRAC_1_SQRT_2, std::f64::consts::FRAC_1_SQRT_2];
    let margin = 0.6 / std::f64::consts::SQRT_2;
    let n = 10_000;
    let mut worst_z = 0.0f64;
    for (i, &(eps, t)) in [(0.0, 0.1), (0.2, 0.1), (0.35, 0.05), (0.4, 0.02), (0.1, 0.2)].iter().enumerate() {
        let x_adv = StateVector::new(x.iter().zip(&toward).map(|(a, d)| a + eps * d).collect()).unwrap();
        let est =
            estimate_class_probs(&clf, &x_adv, &s, &[t], n, 0.999, &NoiseStream::new(9, i as u64, "acceptance/smooth"))
                .map_err(|e| e.to_string())?;
        let p_hat = est.per_t[0].counts[0] as f64 / n as f64;
        let p = normal_cdf((margin - eps) / s.sigma(t).unwrap());
        worst_z = worst_z.max((p_hat - p).abs() / (p * (1.0 - p) / n as f64).sqrt());
    }
    let t = 0.1;
    let est = estimate_class_probs(&clf, &x, &s, &[t], n, 0.999, &NoiseStream::new(9, 99, "acceptance/clean"))
        .map_err(|e| e.to_string())?;
    let cert = compute_certificate(&s, 0.0, est.p1_lower, est.p2_upper).map_err(|e| e.to_string())?;
    let radius = cert.radius_at(t).unwrap();
    let check = |factor: f64, k: u64| {
        verify_certificate(&clf, &x, &toward, factor * radius, t, &s, n, &NoiseStream::new(9, k, "acceptance/verify"))
            .map(|v| v.pass)
            .map_err(|e| e.to_string())
    };
    let inside = check(0.5, 0)? && check(0.9, 1)?;
    let outside = check(3.0, 2)?;
    ensure(
        worst_z < 3.0 && inside && !outside,
        format!(
            "max |z| smoothed accuracy vs closed form = {worst_z:.2} (limit 3); radius {radius:.4}: \
             pass inside = {inside}, pass at 3x = {outside}"
        ),
    )
}

fn drift_trend() -> Outcome {
    let v = theory_check(&ExperimentConfig::default(), 0.01, 1000, Coupling::Shared).map_err(|e| e.to_string())?;
    ensure(
        v.spearman < -0.9 && v.drift_below_bound,
        format!(
            "Spearman = {:.3} (limit -0.9); below bound at all {} grid points = {}",
            v.spearman,
            v.drift.t.len(),
            v.drift_below_bound
        ),
    )
}

fn stopping_rule_boundaries() -> Outcome {
    let bed = Testbed::build(&ExperimentConfig::default()).map_err(|e| e.to_string())?;
    let steps = bed.cfg.purify.steps;
    let taus = [-1.0, 0.9, 0.99, 0.995, 0.998, 0.999, 1.5];
    let mut low_ok = true;
    let mut high_ok = true;
    let mut monotone = true;
    for (i, x) in bed.test.xs.iter().step_by(bed.test.len() / 50).take(50).enumerate() {
        let noise = NoiseStream::new(13, i as u64, "acceptance/stop");
        let stops: Vec<f64> = taus
            .iter()
            .map(|&tau| bed.diffcap(tau).run(x, &noise).map(|r| r.t_stop))
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        low_ok &= (stops[0] - 1.0 / steps as f64).abs() < 1e-12;
        high_ok &= stops[stops.len() - 1] == 1.0;
        monotone &= stops.windows(2).all(|w| w[0] <= w[1]);
    }
    ensure(
        low_ok && high_ok && monotone,
        format!("tau = -1 stops at 1/T: {low_ok}; tau > 1 stops at 1: {high_ok}; monotone over 50 inputs: {monotone}"),
    )
}

fn calibration_boundaries() -> Outcome {
    let bed = Testbed::build(&ExperimentConfig::default()).map_err(|e| e.to_string())?;
    let rep = bed.calibrate(0.0).map_err(|e| e.to_string())?;
    let first_step = rep.per_step.len() == 1 && (rep.t_star - 1.0 / bed.cfg.calibrate.steps as f64).abs() < 1e-12;
    let trials = 1000;
    let rejections: usize = (0..trials)
        .into_par_iter()
        .map(|k| {
            let mut g = NoiseStream::new(17, k, "acceptance/ks-null").source();
            let a = g.vector(100);
            let b = g.vector(100);
            usize::from(ks_two_sample(&a, &b).unwrap().p_value < 0.05)
        })
        .sum();
    let rate = rejections as f64 / trials as f64;
    ensure(
        first_step && (rate - 0.05).abs() <= 0.02,
        format!(
            "eps = 0 stops at step 1: {first_step} (t* = {}); KS null rejection rate = {:.1}%",
            rep.t_star,
            100.0 * rate
        ),
    )
}

fn benchmark_config(dir: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::load(&root().join("configs/benchmark.toml")).unwrap();
    cfg.output_dir = dir.to_path_buf();
    cfg
}

fn end_to_end() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let report = run_experiment(&benchmark_config(dir.path())).map_err(|e| e.to_string())?;
    let o = oracle();
    let clean = report.clean_accuracy;
    let eps = report.presets.iter().map(|p| p.epsilon).fold(0.0, f64::max);
    let half = report.presets.iter().find(|p| (p.epsilon - eps / 2.0).abs() < 1e-12);
    let top = report.preset(eps).ok_or("no presets")?;
    let dc = top.defense("diffcap").ok_or("diffcap missing")?;
    let has_both = report.presets.iter().all(|p| p.defense("diffcap").is_some() && p.defense("fixed-t").is_some());
    let shift = match half.and_then(|p| p.defense("diffcap")) {
        Some(h) => dc.t_stop.mean > h.t_stop.mean,
        None => false,
    };
    let checks = [
        ("clean >= pinned", clean >= o["clean_accuracy"].as_f64().unwrap()),
        ("drop >= 50", clean - top.attacked_accuracy >= 50.0),
        ("diffcap >= attacked + 30", dc.purified_accuracy >= top.attacked_accuracy + 30.0),
        ("diffcap >= clean - 10", dc.purified_accuracy >= clean - 10.0),
        ("t_stop variance > 0", dc.t_stop.std > 0.0),
        ("t_stop shifts up when eps doubles", shift),
        ("diffcap and fixed-t reported", has_both),
    ];
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    let detail = format!(
        "clean {clean}, attacked {} at eps {eps}, diffcap {}, t_stop mean {:.4} (std {:.4}); failed: {:?}",
        top.attacked_accuracy, dc.purified_accuracy, dc.t_stop.mean, dc.t_stop.std, failed
    );
    ensure(failed.is_empty(), detail.clone())?;
    within(start.elapsed(), 300.0, detail)
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = benchmark_config(dir.path());
    cfg.purify.reverse_mode = ReverseMode::ProbabilityFlow;
    let mut runs = Vec::new();
    for _ in 0..2 {
        run_experiment(&cfg).map_err(|e| e.to_string())?;
        runs.push(std::fs::read(dir.path().join(REPORT_FILE)).unwrap());
    }
    ensure(
        runs[0] == runs[1],
        format!("two probability-flow runs, {} bytes, identical = {}", runs[0].len(), runs[0] == runs[1]),
    )
}

fn main() {
    let criteria: [Criterion; 12] = [
        ("schedule exactness", schedule_exactness),
        ("monitor decreasing", monitor_decreasing),
        ("score oracle", score_oracle),
        ("forward consistency", forward_consistency),
        ("reverse round trip", reverse_round_trip),
        ("worked certificate", worked_certificate),
        ("certificate soundness", certificate_soundness),
        ("embedding drift trend", drift_trend),
        ("stopping rule boundaries", stopping_rule_boundaries),
        ("calibration boundaries", calibration_boundaries),
        ("end-to-end benchmark", end_to_end),
        ("determinism", determinism),
    ];
    let mut failures = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail} [{secs:.2}s]", i + 1),
            Err(detail) => {
                failures += 1;
                println!("FAIL {:>2} {name}: {detail} [{secs:.2}s]", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failures, criteria.len());
    if failures > 0 {
        std::process::exit(1);
    }
}
