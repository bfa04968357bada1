//! Data-driven choice of the similarity threshold.
//!
//! Clean and adversarial copies of each image are noised level by level.
//! At every level the per-image consecutive-embedding cosines of the two
//! groups are compared with a two-sample test; the first level at which the
//! groups are indistinguishable fixes `tau` as the mean clean similarity.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embed::{cosine, Encoder};
use crate::error::{Error, Result};
use crate::purify::{InjectionMode, Injector};
use crate::rng::NoiseStream;
use crate::schedule::LinearSchedule;
use crate::sde::StateVector;

/// Below this smaller-sample size the KS p-value is computed exactly.
pub const KS_EXACT_BELOW: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestOutcome {
    pub statistic: f64,
    pub p_value: f64,
}

fn sorted(v: &[f64]) -> Result<Vec<f64>> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("two-sample test input"));
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(s)
}

/// Two-sample Kolmogorov–Smirnov statistic `sup |F_a - F_b|`.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidParameter("KS test needs two non-empty samples".into()));
    }
    let (a, b) = (sorted(a)?, sorted(b)?);
    let (n, m) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let v = a[i].min(b[j]);
        while i < a.len() && a[i] <= v {
            i += 1;
        }
        while j < b.len() && b[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    Ok(d)
}

/// Kolmogorov survival function `Q(λ) = 2 Σ (-1)^{k-1} exp(-2k²λ²)`.
pub fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    if lambda < 1.18 {
        // Jacobi-transformed series, fast for small λ
        let y = (-std::f64::consts::PI.powi(2) / (8.0 * lambda * lambda)).exp();
        let mut s = 0.0;
        let mut k = 1i32;
        loop {
            let term = y.powi(k * k);
            s += term;
            if term < 1e-17 || k > 100 {
                break;
            }
            k += 2;
        }
        (1.0 - (2.0 * std::f64::consts::PI).sqrt() / lambda * s).clamp(0.0, 1.0)
    } else {
        let mut s = 0.0;
        for k in 1..=100 {
            let term = (-2.0 * (k * k) as f64 * lambda * lambda).exp();
            s += if k % 2 == 1 { term } else { -term };
            if term < 1e-17 {
                break;
            }
        }
        (2.0 * s).clamp(0.0, 1.0)
    }
}

/// `P(D >= d)` under the null for sample sizes `n`, `m`, by counting lattice
/// paths that stay strictly inside the band `|i/n - j/m| < d`.
pub fn ks_exact_p(d: f64, n: usize, m: usize) -> f64 {
    if d <= 0.0 {
        return 1.0;
    }
    let (nf, mf) = (n as f64, m as f64);
    // guards against i/n - j/m landing one ulp below d
    let tol = 1e-12;
    let inside = |i: usize, j: usize| (i as f64 / nf - j as f64 / mf).abs() < d - tol;
    let mut u = vec![0.0f64; m + 1];
    for i in 0..=n {
        for j in 0..=m {
            u[j] = if i == 0 && j == 0 {
                1.0
            } else if !inside(i, j) {
                0.0
            } else {
                let (fi, fj) = (i as f64, j as f64);
                let from_up = if i > 0 { u[j] * fi / (fi + fj) } else { 0.0 };
                let from_left = if j > 0 { u[j - 1] * fj / (fi + fj) } else { 0.0 };
                from_up + from_left
            };
        }
    }
    (1.0 - u[m]).clamp(0.0, 1.0)
}

/// Two-sample KS test. The p-value is exact when the smaller sample has
/// fewer than [`KS_EXACT_BELOW`] points and otherwise uses the asymptotic
/// distribution with Stephens' small-sample correction.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<TestOutcome> {
    let d = ks_statistic(a, b)?;
    let (n, m) = (a.len(), b.len());
    let p_value = if n.min(m) < KS_EXACT_BELOW {
        ks_exact_p(d, n, m)
    } else {
        let ne = (n * m) as f64 / (n + m) as f64;
        let sq = ne.sqrt();
        kolmogorov_q((sq + 0.12 + 0.11 / sq) * d)
    };
    Ok(TestOutcome { statistic: d, p_value })
}

/// Two-sided permutation test on the difference of means.
pub fn permutation_test(a: &[f64], b: &[f64], shuffles: usize, noise: &NoiseStream) -> Result<TestOutcome> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidParameter("permutation test needs two non-empty samples".into()));
    }
    if shuffles == 0 {
        return Err(Error::InvalidParameter("permutation test needs at least one shuffle".into()));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let observed = (mean(a) - mean(b)).abs();
    let mut pool: Vec<f64> = a.iter().chain(b).copied().collect();
    if pool.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("two-sample test input"));
    }
    let mut g = noise.source();
    let mut hits = 0usize;
    for _ in 0..shuffles {
        for i in (1..pool.len()).rev() {
            pool.swap(i, g.index(i + 1));
        }
        let diff = (mean(&pool[..a.len()]) - mean(&pool[a.len()..])).abs();
        if diff >= observed - 1e-15 {
            hits += 1;
        }
    }
    Ok(TestOutcome { statistic: observed, p_value: (hits + 1) as f64 / (shuffles + 1) as f64 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SameDistributionTest {
    #[default]
    Ks,
    Permutation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairSet {
    pairs: Vec<(StateVector, StateVector)>,
}

impl PairSet {
    /// `budget` bounds `‖x_adv - x_clean‖∞` when given.
    pub fn new(pairs: Vec<(StateVector, StateVector)>, budget: Option<f64>) -> Result<Self> {
        let Some(first) = pairs.first() else {
            return Err(Error::InvalidParameter("pair set is empty".into()));
        };
        let d = first.0.dim();
        for (i, (c, a)) in pairs.iter().enumerate() {
            c.check_dim(d)?;
            a.check_dim(d)?;
            if let Some(eps) = budget {
                let dist = c.linf_distance(a);
                if dist > eps + 1e-9 {
                    return Err(Error::InvalidParameter(format!(
                        "pair {i} has perturbation {dist} beyond budget {eps}"
                    )));
                }
            }
        }
        Ok(Self { pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[(StateVector, StateVector)] {
        &self.pairs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrateConfig {
    #[serde(rename = "T")]
    pub steps: usize,
    pub alpha: f64,
    pub test: SameDistributionTest,
    pub shuffles: usize,
    pub injection_mode: InjectionMode,
}

impl Default for CalibrateConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            alpha: 0.05,
            test: SameDistributionTest::Ks,
            shuffles: 1000,
            injection_mode: InjectionMode::Shared,
        }
    }
}

impl CalibrateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("calibrate.T must be at least 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("calibrate.alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if self.test == SameDistributionTest::Permutation && self.shuffles == 0 {
            return Err(Error::Config("calibrate.shuffles must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationStep {
    pub t: f64,
    pub statistic: f64,
    pub p_value: f64,
    pub mean_clean: f64,
    pub mean_adv: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub tau: f64,
    pub t_star: f64,
    pub per_step: Vec<CalibrationStep>,
    pub n_pairs: usize,
    /// False when the groups stayed distinguishable up to `t = 1`.
    pub converged: bool,
    pub test: SameDistributionTest,
    pub alpha: f64,
}

struct Track {
    clean: Injector,
    adv: Injector,
    e_clean: Vec<f64>,
    e_adv: Vec<f64>,
}

fn step_similarity(
    inj: &mut Injector,
    prev: &mut Vec<f64>,
    encoder: &dyn Encoder,
    what: &str,
    i: usize,
) -> Result<f64> {
    inj.advance()?;
    let e = encoder.encode(inj.state())?;
    let k = inj.level();
    let s = cosine(&e, prev)
        .map_err(|_| Error::UndefinedSimilarity(format!("{what} image of pair {i} at step {k} (or {})", k - 1)))?;
    *prev = e;
    Ok(s)
}

/// Runs the calibration loop. Both images of pair `i` use the noise stream
/// `noise.substream(i, "calibrate/pair")`, so identical images give
/// identical similarity sequences.
pub fn calibrate_tau(
    pairs: &PairSet,
    encoder: &dyn Encoder,
    schedule: &LinearSchedule,
    cfg: &CalibrateConfig,
    noise: &NoiseStream,
) -> Result<CalibrationReport> {
    cfg.validate().map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let mut tracks = pairs
        .pairs()
        .iter()
        .enumerate()
        .map(|(i, (c, a))| {
            let sub = noise.substream(i as u64, "calibrate/pair");
            Ok(Track {
                clean: Injector::new(c, cfg.injection_mode, cfg.steps, *schedule, &sub)?,
                adv: Injector::new(a, cfg.injection_mode, cfg.steps, *schedule, &sub)?,
                e_clean: encoder.encode(c)?,
                e_adv: encoder.encode(a)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut per_step = Vec::new();
    for k in 1..=cfg.steps {
        let sims = tracks
            .par_iter_mut()
            .enumerate()
            .map(|(i, tr)| {
                let sc = step_similarity(&mut tr.clean, &mut tr.e_clean, encoder, "clean", i)?;
                let sa = step_similarity(&mut tr.adv, &mut tr.e_adv, encoder, "adversarial", i)?;
                Ok((sc, sa))
            })
            .collect::<Result<Vec<_>>>()?;
        let (s_clean, s_adv): (Vec<f64>, Vec<f64>) = sims.into_iter().unzip();
        let outcome = match cfg.test {
            SameDistributionTest::Ks => ks_two_sample(&s_clean, &s_adv)?,
            SameDistributionTest::Permutation => {
                permutation_test(&s_clean, &s_adv, cfg.shuffles, &noise.substream(k as u64, "calibrate/shuffle"))?
            }
        };
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let t = k as f64 / cfg.steps as f64;
        per_step.push(CalibrationStep {
            t,
            statistic: outcome.statistic,
            p_value: outcome.p_value,
            mean_clean: mean(&s_clean),
            mean_adv: mean(&s_adv),
        });
        let fired = outcome.p_value >= cfg.alpha;
        if fired || k == cfg.steps {
            let tau = mean(&s_clean).clamp(-1.0, 1.0);
            return Ok(CalibrationReport {
                tau,
                t_star: t,
                per_step,
                n_pairs: pairs.len(),
                converged: fired,
                test: cfg.test,
                alpha: cfg.alpha,
            });
        }
    }
    unreachable!("loop returns at k == T")
}
