//! End-to-end pipeline: synthesize, build the classifier, attack, calibrate,
//! purify, evaluate, certify, report.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::attack::{adaptive_batch, pgd_batch, AdversarialExample};
use crate::calibrate::{calibrate_tau, CalibrationReport, PairSet};
use crate::certify::{compute_certificate, estimate_class_probs};
use crate::embed::{AnyEncoder, CosineClassifier, PrototypeSet};
use crate::error::{Error, Result};
use crate::harness::config::ExperimentConfig;
use crate::harness::dataset::{synth_with_stream, Dataset};
use crate::harness::report::{
    AdaptiveResult, CalibrationSummary, CertificateRecord, DatasetSummary, DefenseResult, DistributionSummary,
    ExperimentReport, PresetResult, ToolInfo, SCHEMA_VERSION,
};
use crate::harness::tensor::Tensor;
use crate::purify::{DiffCapPurifier, FixedTimePurifier, InjectionMode, PurificationResult, PurifyConfig};
use crate::rng::NoiseStream;
use crate::sde::{GmmScore, StateVector};

pub const REPORT_FILE: &str = "report.json";
pub const TIMINGS_FILE: &str = "timings.json";

/// Everything derived deterministically from the config before any attack.
pub struct Testbed {
    pub cfg: ExperimentConfig,
    pub clf: CosineClassifier<AnyEncoder>,
    pub score: GmmScore,
    pub test: Dataset,
    pub calibration: Option<Dataset>,
}

impl Testbed {
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        let test = synth_with_stream(&cfg.gmm, cfg.data.n_per_class, &NoiseStream::new(cfg.seed, 0, "data/test"))?;
        let calibration = if cfg.calibrate.enabled {
            Some(synth_with_stream(
                &cfg.gmm,
                cfg.data.calibration_per_class,
                &NoiseStream::new(cfg.seed, 0, "data/calibration"),
            )?)
        } else {
            None
        };
        let encoder = cfg.encoder.build(cfg.gmm.dim())?;
        let protos = PrototypeSet::from_class_means(&encoder, cfg.gmm.means())?;
        let clf = CosineClassifier::new(encoder, protos)?;
        Ok(Self {
            cfg: cfg.clone(),
            clf,
            score: GmmScore { p0: cfg.gmm.clone(), schedule: cfg.schedule },
            test,
            calibration,
        })
    }

    pub fn encoder(&self) -> &AnyEncoder {
        self.clf.encoder()
    }

    pub fn diffcap(&self, tau: f64) -> DiffCapPurifier<'_> {
        DiffCapPurifier {
            encoder: self.clf.encoder(),
            schedule: self.cfg.schedule,
            score: &self.score,
            cfg: PurifyConfig { tau, ..self.cfg.purify.base() },
        }
    }

    pub fn fixed_time(&self) -> FixedTimePurifier<'_> {
        FixedTimePurifier {
            schedule: self.cfg.schedule,
            score: &self.score,
            t_fixed: self.cfg.purify.fixed_t,
            reverse_steps: self.cfg.purify.reverse_steps,
            reverse_mode: self.cfg.purify.reverse_mode,
        }
    }

    pub fn accuracy(&self, xs: &[StateVector], labels: &[usize]) -> Result<f64> {
        let correct = xs
            .par_iter()
            .zip(labels)
            .map(|(x, &y)| Ok(usize::from(self.clf.classify(x)? == y)))
            .collect::<Result<Vec<_>>>()?;
        Ok(percent(correct.iter().sum(), xs.len()))
    }

    /// Attacks the calibration set at `epsilon` and runs threshold
    /// calibration on the resulting pairs.
    pub fn calibrate(&self, epsilon: f64) -> Result<CalibrationReport> {
        let data =
            self.calibration.as_ref().ok_or_else(|| Error::InvalidParameter("calibration data disabled".into()))?;
        let adv = pgd_batch(
            &self.clf,
            &data.xs,
            &data.labels,
            &self.cfg.attack.config(epsilon),
            calibration_seed(self.cfg.seed),
        )?;
        let pairs = PairSet::new(adv.into_iter().map(|a| (a.x_clean, a.x_adv)).collect(), Some(epsilon))?;
        calibrate_tau(
            &pairs,
            self.encoder(),
            &self.cfg.schedule,
            &self.cfg.calibrate.base(self.cfg.purify.injection_mode),
            &NoiseStream::new(self.cfg.seed, 0, "calibrate"),
        )
    }
}

fn calibration_seed(seed: u64) -> u64 {
    crate::rng::mix64(seed ^ 0xCA11_B8A7)
}

pub fn percent(correct: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * correct as f64 / total as f64
    }
}

fn warnings(cfg: &ExperimentConfig, calibration: Option<&CalibrationReport>) -> Vec<String> {
    let mut out = Vec::new();
    if cfg.purify.injection_mode == InjectionMode::Resample {
        out.push(
            "injection_mode = resample is diagnostic only: consecutive embeddings are nearly independent, \
             so the stopping rule degrades"
                .into(),
        );
    }
    if let Some(c) = calibration.filter(|c| !c.converged) {
        out.push(format!(
            "calibration did not converge: clean and adversarial similarities stayed distinguishable up to t = 1 \
             (tau = {})",
            c.tau
        ));
    }
    out
}

/// Per-point purification stream; the same across budgets so that presets
/// are compared under common noise.
pub fn purify_stream(seed: u64, index: usize) -> NoiseStream {
    NoiseStream::new(seed, index as u64, "purify")
}

#[derive(Debug, Serialize)]
struct PurifyRecord<'a> {
    index: usize,
    t_stop: f64,
    steps_used: usize,
    similarity_trace: &'a [f64],
}

#[derive(Debug, Clone, Serialize)]
pub struct StageTiming {
    pub stage: &'static str,
    pub seconds: f64,
}

struct Run {
    dir: PathBuf,
    timings: Vec<StageTiming>,
}

impl Run {
    fn stage<T>(&mut self, stage: &'static str, f: impl FnOnce(&Path) -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f(&self.dir).map_err(|e| Error::Stage { stage, source: Box::new(e) });
        self.timings.push(StageTiming { stage, seconds: start.elapsed().as_secs_f64() });
        out
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(crate::harness::report::ReportError::from)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn eps_tag(eps: f64) -> String {
    format!("eps{eps}")
}

fn purify_all(
    purify: impl Fn(&StateVector, &NoiseStream) -> Result<PurificationResult> + Sync,
    xs: &[StateVector],
    seed: u64,
) -> Result<Vec<PurificationResult>> {
    xs.par_iter().enumerate().map(|(i, x)| purify(x, &purify_stream(seed, i))).collect()
}

/// Runs the full pipeline, writing artifacts into `cfg.output_dir` as each
/// stage completes. A failing stage aborts the run with its name attached;
/// files from earlier stages are left in place.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let dir = cfg.output_dir.clone();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut run = Run { dir, timings: Vec::new() };
    let seed = cfg.seed;

    let bed = run.stage("synth", |dir| {
        let bed = Testbed::build(cfg)?;
        bed.test.save(dir, "test")?;
        if let Some(c) = &bed.calibration {
            c.save(dir, "calibration")?;
        }
        match bed.encoder() {
            AnyEncoder::Linear(e) => Tensor::from_rows(e.rows())?.save(&dir.join("encoder_linear.tensor"))?,
            AnyEncoder::Mlp(e) => {
                Tensor::from_rows(e.hidden_weights())?.save(&dir.join("encoder_hidden_w.tensor"))?;
                Tensor::from_rows(&[e.hidden_bias()])?.save(&dir.join("encoder_hidden_b.tensor"))?;
                Tensor::from_rows(e.output_weights())?.save(&dir.join("encoder_out_w.tensor"))?;
            }
        }
        Tensor::from_rows(bed.clf.prototypes().vectors())?.save(&dir.join("prototypes.tensor"))?;
        Ok(bed)
    })?;
    let (xs, labels) = (&bed.test.xs, &bed.test.labels);

    let clean_accuracy = run.stage("clean-eval", |_| bed.accuracy(xs, labels))?;

    let attacks: Vec<(f64, Vec<AdversarialExample>)> = run.stage("attack", |dir| {
        cfg.attack
            .epsilons
            .iter()
            .map(|&eps| {
                let adv = pgd_batch(&bed.clf, xs, labels, &cfg.attack.config(eps), seed)?;
                Tensor::from_rows(&adv.iter().map(|a| &a.x_adv).collect::<Vec<_>>())?
                    .save(&dir.join(format!("adv_{}.tensor", eps_tag(eps))))?;
                Ok((eps, adv))
            })
            .collect()
    })?;

    let calibration = if cfg.calibrate.enabled {
        Some(run.stage("calibrate", |dir| {
            let r = bed.calibrate(cfg.attack.default_epsilon)?;
            write_json(&dir.join("calibration.json"), &r)?;
            Ok(r)
        })?)
    } else {
        None
    };
    let tau_used = match &calibration {
        Some(c) if cfg.purify.use_calibrated_tau => c.tau,
        _ => cfg.purify.tau,
    };

    let diffcap = bed.diffcap(tau_used);
    let fixed = bed.fixed_time();
    // per preset: (diffcap results, fixed-t results)
    let purified: Vec<(Vec<PurificationResult>, Vec<PurificationResult>)> = run.stage("purify", |dir| {
        attacks
            .iter()
            .map(|(eps, adv)| {
                let inputs: Vec<StateVector> = adv.iter().map(|a| a.x_adv.clone()).collect();
                let d = purify_all(|x, n| diffcap.run(x, n), &inputs, seed)?;
                let f = purify_all(|x, n| fixed.run(x, n), &inputs, seed)?;
                let tag = eps_tag(*eps);
                Tensor::from_rows(&d.iter().map(|r| &r.x_clean).collect::<Vec<_>>())?
                    .save(&dir.join(format!("purified_diffcap_{tag}.tensor")))?;
                Tensor::from_rows(&f.iter().map(|r| &r.x_clean).collect::<Vec<_>>())?
                    .save(&dir.join(format!("purified_fixed_{tag}.tensor")))?;
                let records: Vec<PurifyRecord> = d
                    .iter()
                    .enumerate()
                    .map(|(index, r)| PurifyRecord {
                        index,
                        t_stop: r.t_stop,
                        steps_used: r.steps_used,
                        similarity_trace: &r.similarity_trace,
                    })
                    .collect();
                write_json(&dir.join(format!("purify_diffcap_{tag}.json")), &records)?;
                Ok((d, f))
            })
            .collect()
    })?;

    let presets: Vec<PresetResult> = run.stage("purified-eval", |_| {
        attacks
            .iter()
            .zip(&purified)
            .map(|((eps, adv), (d, f))| {
                let adv_x: Vec<StateVector> = adv.iter().map(|a| a.x_adv.clone()).collect();
                let n = adv.len() as f64;
                let defense = |name: &str, res: &[PurificationResult]| -> Result<DefenseResult> {
                    let cleaned: Vec<StateVector> = res.iter().map(|r| r.x_clean.clone()).collect();
                    let stops: Vec<f64> = res.iter().map(|r| r.t_stop).collect();
                    Ok(DefenseResult {
                        name: name.into(),
                        purified_accuracy: bed.accuracy(&cleaned, labels)?,
                        t_stop: DistributionSummary::from_values(&stops).expect("non-empty test set"),
                    })
                };
                Ok(PresetResult {
                    epsilon: *eps,
                    attacked_accuracy: bed.accuracy(&adv_x, labels)?,
                    mean_linf: adv.iter().map(|a| a.linf_norm).sum::<f64>() / n,
                    mean_l2: adv.iter().map(|a| a.l2_norm).sum::<f64>() / n,
                    defenses: vec![defense("diffcap", d)?, defense("fixed-t", f)?],
                })
            })
            .collect()
    })?;

    let default_idx = cfg.attack.epsilons.iter().position(|&e| e == cfg.attack.default_epsilon).expect("validated");

    let adaptive = if cfg.attack.adaptive && cfg.attack.adaptive_points > 0 {
        Some(run.stage("adaptive", |dir| {
            let n = cfg.attack.adaptive_points.min(xs.len());
            let eps = cfg.attack.default_epsilon;
            let adv = adaptive_batch(
                &bed.clf,
                &diffcap,
                &xs[..n],
                &labels[..n],
                &cfg.attack.config(eps),
                cfg.attack.adaptive_mode,
                cfg.attack.eot_samples,
                seed,
            )?;
            Tensor::from_rows(&adv.iter().map(|a| &a.x_adv).collect::<Vec<_>>())?
                .save(&dir.join(format!("adv_adaptive_{}.tensor", eps_tag(eps))))?;
            let inputs: Vec<StateVector> = adv.iter().map(|a| a.x_adv.clone()).collect();
            let cleaned: Vec<StateVector> =
                purify_all(|x, s| diffcap.run(x, s), &inputs, seed)?.into_iter().map(|r| r.x_clean).collect();
            let plain = &attacks[default_idx].1[..n];
            let plain_x: Vec<StateVector> = plain.iter().map(|a| a.x_adv.clone()).collect();
            let transfer: Vec<StateVector> = purified[default_idx].0[..n].iter().map(|r| r.x_clean.clone()).collect();
            Ok(AdaptiveResult {
                mode: cfg.attack.adaptive_mode,
                eot_samples: cfg.attack.eot_samples,
                epsilon: eps,
                n_points: n,
                undefended_accuracy: bed.accuracy(&plain_x, &labels[..n])?,
                transfer_purified_accuracy: bed.accuracy(&transfer, &labels[..n])?,
                adaptive_purified_accuracy: bed.accuracy(&cleaned, &labels[..n])?,
            })
        })?)
    } else {
        None
    };

    let certificates = run.stage("certify", |_| {
        let n = cfg.certify.n_points.min(xs.len());
        (0..n)
            .map(|i| {
                let eps_l2 = attacks[default_idx].1[i].l2_norm;
                let est = estimate_class_probs(
                    &bed.clf,
                    &xs[i],
                    &cfg.schedule,
                    &cfg.certify.t_grid,
                    cfg.certify.n_mc,
                    cfg.certify.confidence,
                    &NoiseStream::new(seed, i as u64, "certify"),
                )?;
                let (certificate, note) = match compute_certificate(&cfg.schedule, eps_l2, est.p1_lower, est.p2_upper) {
                    Ok(c) => (Some(c), None),
                    Err(e @ (Error::DegenerateMargin { .. } | Error::Domain { .. })) => (None, Some(e.to_string())),
                    Err(e) => return Err(e),
                };
                Ok(CertificateRecord {
                    index: i,
                    label: labels[i],
                    k1: est.k1,
                    eps_l2,
                    p1_lower: est.p1_lower,
                    p2_upper: est.p2_upper,
                    n_mc: est.n_samples,
                    confidence: est.confidence,
                    t_grid: est.t_grid,
                    holds_on: est.holds_on,
                    certificate,
                    note,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let warnings = warnings(cfg, calibration.as_ref());
    let report = ExperimentReport {
        schema_version: SCHEMA_VERSION.into(),
        tool: ToolInfo::default(),
        config: serde_json::to_value(cfg).map_err(crate::harness::report::ReportError::from)?,
        dataset: DatasetSummary {
            n_test: xs.len(),
            n_classes: bed.clf.n_classes(),
            dim: cfg.gmm.dim(),
            n_calibration_pairs: bed.calibration.as_ref().map_or(0, Dataset::len),
        },
        clean_accuracy,
        calibration: calibration.map(|c| CalibrationSummary {
            tau: c.tau,
            t_star: c.t_star,
            converged: c.converged,
            n_pairs: c.n_pairs,
            test: serde_json::to_value(c.test).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default(),
            alpha: c.alpha,
            per_step: c.per_step,
        }),
        tau_used,
        fixed_t: cfg.purify.fixed_t,
        presets,
        adaptive,
        certificates,
        warnings,
        timings_file: TIMINGS_FILE.into(),
    };
    run.stage("report", |dir| {
        crate::harness::report::validate(
            &serde_json::to_value(&report).map_err(crate::harness::report::ReportError::from)?,
        )?;
        report.write(&dir.join(REPORT_FILE))?;
        Ok(())
    })?;
    write_json(&run.dir.join(TIMINGS_FILE), &run.timings)?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct TheoryVerdict {
    pub monitor: crate::theory::MonitorReport,
    pub lipschitz: crate::theory::LipschitzEstimate,
    pub lipschitz_region: (f64, f64),
    /// Exact operator norm, linear encoders only.
    pub operator_norm: Option<f64>,
    pub drift: crate::theory::DriftCurve,
    pub spearman: f64,
    pub drift_decreasing: bool,
    pub drift_below_bound: bool,
    pub convergence: crate::theory::ConvergenceReport,
    pub pass: bool,
}

/// Region in which encoder secants are sampled; wide enough to cover noised
/// states `√α·x0 + √(1−α)·ε` with high probability.
pub const LIPSCHITZ_REGION: (f64, f64) = (-3.0, 3.0);

/// Runs the monitor, drift and convergence checks on the first test point.
/// The drift grid is `0.10, 0.15, …, 0.90`.
pub fn theory_check(
    cfg: &ExperimentConfig,
    delta: f64,
    n_mc: usize,
    coupling: crate::theory::Coupling,
) -> Result<TheoryVerdict> {
    use crate::theory::{
        convergence_check, embedding_drift_curve, lipschitz_estimate, monitor_decreasing_check, spearman,
    };
    cfg.validate()?;
    let bed = Testbed::build(cfg)?;
    let x0 = &bed.test.xs[0];
    let enc = bed.encoder();
    let monitor = monitor_decreasing_check(&cfg.schedule, 10_000)?;
    let (lo, hi) = LIPSCHITZ_REGION;
    let lipschitz = lipschitz_estimate(enc, lo, hi, 1000, &NoiseStream::new(cfg.seed, 0, "theory/lipschitz"))?;
    let operator_norm = match enc {
        AnyEncoder::Linear(e) => Some(e.operator_norm()),
        AnyEncoder::Mlp(_) => None,
    };
    let grid: Vec<f64> = (0..17).map(|i| 0.10 + 0.05 * i as f64).collect();
    let drift = embedding_drift_curve(
        enc,
        x0,
        &cfg.schedule,
        delta,
        &grid,
        n_mc,
        lipschitz.estimate,
        coupling,
        &NoiseStream::new(cfg.seed, 0, "theory/drift"),
    )?;
    let rho = spearman(&drift.t, &drift.estimate)?;
    let pairs = [(0.90, 0.91), (0.95, 0.96), (0.99, 1.0)];
    let (t1, t2) = pairs[pairs.len() - 1];
    let ceiling = drift.bound_constant * (t2 - t1) * cfg.schedule.monitor_f(t1)?;
    let convergence = convergence_check(
        enc,
        x0,
        &cfg.schedule,
        &pairs,
        n_mc,
        ceiling,
        &NoiseStream::new(cfg.seed, 0, "theory/convergence"),
    )?;
    let drift_decreasing = rho < -0.9;
    let drift_below_bound = drift.dominated();
    Ok(TheoryVerdict {
        pass: monitor.pass && drift_decreasing && drift_below_bound && convergence.pass,
        monitor,
        lipschitz,
        lipschitz_region: LIPSCHITZ_REGION,
        operator_norm,
        drift,
        spearman: rho,
        drift_decreasing,
        drift_below_bound,
        convergence,
    })
}
