//! `diffcap` command-line interface.
//!
//! Exit codes: 0 success, 2 configuration error, 3 stage failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use diffcap::attack::{adaptive_batch, pgd_batch, AdaptiveMode};
use diffcap::calibrate::{calibrate_tau, PairSet};
use diffcap::certify::{compute_certificate, estimate_class_probs};
use diffcap::harness::config::ExperimentConfig;
use diffcap::harness::experiment::{purify_stream, run_experiment, theory_check, Testbed, REPORT_FILE};
use diffcap::harness::tensor::Tensor;
use diffcap::purify::{InjectionMode, PurificationResult};
use diffcap::rng::NoiseStream;
use diffcap::sde::{ReverseMode, StateVector};
use diffcap::theory::Coupling;
use diffcap::Error;

#[derive(Parser)]
#[command(name = "diffcap", version, about = "Adaptive diffusion purification on a Gaussian-mixture testbed")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed, replacing the config's `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, replacing the config's `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum AttackMode {
    Pgd,
    Bpda,
    #[value(name = "bpda+eot")]
    BpdaEot,
}

#[derive(Clone, Copy, ValueEnum)]
enum InjectArg {
    Shared,
    Markov,
    Resample,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReverseArg {
    Stochastic,
    ProbabilityFlow,
}

#[derive(Clone, Copy, ValueEnum)]
enum CouplingArg {
    Shared,
    Markov,
}

#[derive(Subcommand)]
enum Command {
    /// Choose the similarity threshold from clean/adversarial pairs.
    Calibrate {
        #[command(flatten)]
        common: Common,
        /// Tensor of shape [n, 2, d] holding (clean, adversarial) pairs;
        /// generated from the config when omitted.
        #[arg(long)]
        pairs: Option<PathBuf>,
        #[arg(long = "T")]
        steps: Option<usize>,
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Attack the test set (or `--input`) and write adversarial tensors.
    Attack {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        eps: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        step_size: Option<f64>,
        #[arg(long, value_enum, default_value = "pgd")]
        mode: AttackMode,
        #[arg(long)]
        eot_samples: Option<usize>,
        /// Tensor [n, d] of inputs; labels come from `--labels`.
        #[arg(long, requires = "labels")]
        input: Option<PathBuf>,
        /// Tensor [n, 1] of integer labels.
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Purify a tensor of inputs and write the result plus per-image records.
    Purify {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long = "T")]
        steps: Option<usize>,
        #[arg(long)]
        min_t: Option<f64>,
        /// Noise injection mode.
        #[arg(long, value_enum)]
        mode: Option<InjectArg>,
        #[arg(long, value_enum)]
        reverse: Option<ReverseArg>,
        /// Use the fixed-depth baseline at this time instead of DiffCAP.
        #[arg(long)]
        fixed_t: Option<f64>,
    },
    /// Estimate smoothed class probabilities and certificates on test points.
    Certify {
        #[command(flatten)]
        common: Common,
        /// ℓ₂ perturbation size to certify against.
        #[arg(long)]
        eps: f64,
        #[arg(long, value_delimiter = ',')]
        t_grid: Option<Vec<f64>>,
        #[arg(long)]
        n_mc: Option<usize>,
        /// Number of test points.
        #[arg(long)]
        points: Option<usize>,
    },
    /// Run the full pipeline and write report.json.
    Experiment {
        #[command(flatten)]
        common: Common,
    },
    /// Numerical checks of the monitor function, embedding drift and
    /// convergence; writes drift.csv and prints a verdict.
    TheoryCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0.01)]
        delta: f64,
        #[arg(long, default_value_t = 1000)]
        n_mc: usize,
        #[arg(long, value_enum, default_value = "shared")]
        coupling: CouplingArg,
    },
}

fn load(common: &Common) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => {
            let mut c = ExperimentConfig::default();
            c.apply_env();
            c
        }
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.output_dir = o.clone();
    }
    Ok(cfg)
}

fn print(value: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(value).expect("JSON value serializes"));
}

fn ensure_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn read_rows(path: &Path) -> anyhow::Result<Vec<StateVector>> {
    let t = Tensor::load(path).with_context(|| format!("reading {}", path.display()))?;
    anyhow::ensure!(t.shape().len() == 2, "{} must be a 2-d tensor, got shape {:?}", path.display(), t.shape());
    Ok(t.rows().into_iter().map(StateVector::new).collect::<Result<_, _>>()?)
}

fn calibrate(common: Common, pairs: Option<PathBuf>, steps: Option<usize>, alpha: Option<f64>) -> anyhow::Result<()> {
    let mut cfg = load(&common)?;
    cfg.calibrate.enabled = true;
    if let Some(t) = steps {
        cfg.calibrate.steps = t;
    }
    if let Some(a) = alpha {
        cfg.calibrate.alpha = a;
    }
    cfg.validate()?;
    let bed = Testbed::build(&cfg)?;
    let report = match pairs {
        None => bed.calibrate(cfg.attack.default_epsilon)?,
        Some(p) => {
            let t = Tensor::load(&p).with_context(|| format!("reading {}", p.display()))?;
            let [n, 2, d] = t.shape() else {
                anyhow::bail!("{} must have shape [n, 2, d], got {:?}", p.display(), t.shape());
            };
            let (n, d) = (*n, *d);
            let vals: Vec<f64> = t.data().iter().map(|&v| f64::from(v)).collect();
            let pairs = (0..n)
                .map(|i| {
                    let base = i * 2 * d;
                    Ok((
                        StateVector::new(vals[base..base + d].to_vec())?,
                        StateVector::new(vals[base + d..base + 2 * d].to_vec())?,
                    ))
                })
                .collect::<Result<Vec<_>, Error>>()?;
            calibrate_tau(
                &PairSet::new(pairs, None)?,
                bed.encoder(),
                &cfg.schedule,
                &cfg.calibrate.base(cfg.purify.injection_mode),
                &NoiseStream::new(cfg.seed, 0, "calibrate"),
            )?
        }
    };
    print(&serde_json::to_value(&report)?);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn attack(
    common: Common,
    eps: Option<f64>,
    steps: Option<usize>,
    step_size: Option<f64>,
    mode: AttackMode,
    eot_samples: Option<usize>,
    input: Option<PathBuf>,
    labels: Option<PathBuf>,
) -> anyhow::Result<()> {
    let mut cfg = load(&common)?;
    let eps = eps.unwrap_or(cfg.attack.default_epsilon);
    if let Some(s) = steps {
        cfg.attack.n_steps = s;
    }
    if let Some(e) = eot_samples {
        cfg.attack.eot_samples = e;
    }
    cfg.validate()?;
    let mut acfg = cfg.attack.config(eps);
    if let Some(s) = step_size {
        acfg.step_size = s;
    }
    acfg.validate()?;
    let bed = Testbed::build(&cfg)?;
    let (xs, ys) = match (input, labels) {
        (Some(x), Some(y)) => {
            let xs = read_rows(&x)?;
            let ys: Vec<usize> = Tensor::load(&y)?.data().iter().map(|&v| v as usize).collect();
            (xs, ys)
        }
        _ => (bed.test.xs.clone(), bed.test.labels.clone()),
    };
    let adv = match mode {
        AttackMode::Pgd => pgd_batch(&bed.clf, &xs, &ys, &acfg, cfg.seed)?,
        AttackMode::Bpda | AttackMode::BpdaEot => {
            let m = if matches!(mode, AttackMode::Bpda) { AdaptiveMode::Bpda } else { AdaptiveMode::BpdaEot };
            let purifier = bed.diffcap(cfg.purify.tau);
            adaptive_batch(&bed.clf, &purifier, &xs, &ys, &acfg, m, cfg.attack.eot_samples, cfg.seed)?
        }
    };
    ensure_dir(&cfg.output_dir)?;
    let path = cfg.output_dir.join(format!("attack_eps{eps}.tensor"));
    Tensor::from_rows(&adv.iter().map(|a| &a.x_adv).collect::<Vec<_>>())?.save(&path)?;
    let n = adv.len() as f64;
    let adv_x: Vec<StateVector> = adv.iter().map(|a| a.x_adv.clone()).collect();
    print(&json!({
        "n": adv.len(),
        "epsilon": eps,
        "step_size": acfg.step_size,
        "n_steps": acfg.n_steps,
        "success_rate": 100.0 * adv.iter().filter(|a| a.success).count() as f64 / n,
        "clean_accuracy": bed.accuracy(&xs, &ys)?,
        "attacked_accuracy": bed.accuracy(&adv_x, &ys)?,
        "mean_linf": adv.iter().map(|a| a.linf_norm).sum::<f64>() / n,
        "mean_l2": adv.iter().map(|a| a.l2_norm).sum::<f64>() / n,
        "output": path,
    }));
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn purify(
    common: Common,
    input: PathBuf,
    tau: Option<f64>,
    steps: Option<usize>,
    min_t: Option<f64>,
    mode: Option<InjectArg>,
    reverse: Option<ReverseArg>,
    fixed_t: Option<f64>,
) -> anyhow::Result<()> {
    let mut cfg = load(&common)?;
    let p = &mut cfg.purify;
    if let Some(v) = tau {
        p.tau = v;
    }
    if let Some(v) = steps {
        p.steps = v;
    }
    if let Some(v) = min_t {
        p.min_t = v;
    }
    if let Some(m) = mode {
        p.injection_mode = match m {
            InjectArg::Shared => InjectionMode::Shared,
            InjectArg::Markov => InjectionMode::Markov,
            InjectArg::Resample => InjectionMode::Resample,
        };
    }
    if let Some(r) = reverse {
        p.reverse_mode = match r {
            ReverseArg::Stochastic => ReverseMode::Stochastic,
            ReverseArg::ProbabilityFlow => ReverseMode::ProbabilityFlow,
        };
    }
    if let Some(t) = fixed_t {
        p.fixed_t = t;
    }
    cfg.validate()?;
    let bed = Testbed::build(&cfg)?;
    let xs = read_rows(&input)?;
    let results: Vec<PurificationResult> = if fixed_t.is_some() {
        let f = bed.fixed_time();
        xs.iter().enumerate().map(|(i, x)| f.run(x, &purify_stream(cfg.seed, i))).collect::<Result<_, _>>()?
    } else {
        let d = bed.diffcap(cfg.purify.tau);
        xs.iter().enumerate().map(|(i, x)| d.run(x, &purify_stream(cfg.seed, i))).collect::<Result<_, _>>()?
    };
    ensure_dir(&cfg.output_dir)?;
    let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("input");
    let out = cfg.output_dir.join(format!("{stem}_purified.tensor"));
    Tensor::from_rows(&results.iter().map(|r| &r.x_clean).collect::<Vec<_>>())?.save(&out)?;
    let records: Vec<_> = results
        .iter()
        .enumerate()
        .map(|(i, r)| json!({"index": i, "t_stop": r.t_stop, "steps_used": r.steps_used, "similarity_trace": r.similarity_trace}))
        .collect();
    print(&json!({ "output": out, "records": records }));
    Ok(())
}

fn certify(
    common: Common,
    eps: f64,
    t_grid: Option<Vec<f64>>,
    n_mc: Option<usize>,
    points: Option<usize>,
) -> anyhow::Result<()> {
    let mut cfg = load(&common)?;
    if let Some(g) = t_grid {
        cfg.certify.t_grid = g;
    }
    if let Some(n) = n_mc {
        cfg.certify.n_mc = n;
    }
    if let Some(p) = points {
        cfg.certify.n_points = p;
    }
    cfg.validate()?;
    let bed = Testbed::build(&cfg)?;
    let n = cfg.certify.n_points.min(bed.test.len());
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let est = estimate_class_probs(
            &bed.clf,
            &bed.test.xs[i],
            &cfg.schedule,
            &cfg.certify.t_grid,
            cfg.certify.n_mc,
            cfg.certify.confidence,
            &NoiseStream::new(cfg.seed, i as u64, "certify"),
        )?;
        let cert = match compute_certificate(&cfg.schedule, eps, est.p1_lower, est.p2_upper) {
            Ok(c) => {
                let radii = c.radius_table(&cfg.certify.t_grid)?;
                json!({"certificate": c, "radius_at": radii})
            }
            Err(e @ Error::DegenerateMargin { .. }) => json!({"certificate": null, "note": e.to_string()}),
            Err(e) => return Err(e.into()),
        };
        out.push(json!({"index": i, "label": bed.test.labels[i], "estimate": est, "result": cert}));
    }
    print(&json!(out));
    Ok(())
}

fn experiment(common: Common) -> anyhow::Result<()> {
    let cfg = load(&common)?;
    let report = run_experiment(&cfg)?;
    let presets: Vec<_> = report
        .presets
        .iter()
        .map(|p| {
            json!({
                "epsilon": p.epsilon,
                "attacked": p.attacked_accuracy,
                "defenses": p.defenses.iter().map(|d| json!({
                    "name": d.name,
                    "purified": d.purified_accuracy,
                    "t_stop_mean": d.t_stop.mean,
                })).collect::<Vec<_>>(),
            })
        })
        .collect();
    print(&json!({
        "report": cfg.output_dir.join(REPORT_FILE),
        "clean_accuracy": report.clean_accuracy,
        "tau_used": report.tau_used,
        "presets": presets,
        "adaptive": report.adaptive,
    }));
    Ok(())
}

fn theory(common: Common, delta: f64, n_mc: usize, coupling: CouplingArg) -> anyhow::Result<()> {
    let cfg = load(&common)?;
    let coupling = match coupling {
        CouplingArg::Shared => Coupling::Shared,
        CouplingArg::Markov => Coupling::Markov,
    };
    let verdict = theory_check(&cfg, delta, n_mc, coupling)?;
    ensure_dir(&cfg.output_dir)?;
    let csv = cfg.output_dir.join("drift.csv");
    std::fs::write(&csv, verdict.drift.to_csv()).with_context(|| format!("writing {}", csv.display()))?;
    let mut v = serde_json::to_value(&verdict)?;
    v["csv"] = json!(csv);
    print(&v);
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Stage { .. }) => 3,
        Some(e) if e.is_config() => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Calibrate { common, pairs, steps, alpha } => calibrate(common, pairs, steps, alpha),
        Command::Attack { common, eps, steps, step_size, mode, eot_samples, input, labels } => {
            attack(common, eps, steps, step_size, mode, eot_samples, input, labels)
        }
        Command::Purify { common, input, tau, steps, min_t, mode, reverse, fixed_t } => {
            purify(common, input, tau, steps, min_t, mode, reverse, fixed_t)
        }
        Command::Certify { common, eps, t_grid, n_mc, points } => certify(common, eps, t_grid, n_mc, points),
        Command::Experiment { common } => experiment(common),
        Command::TheoryCheck { common, delta, n_mc, coupling } => theory(common, delta, n_mc, coupling),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
