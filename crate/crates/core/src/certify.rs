//! Certified recovery region of the noised classifier.
//!
//! For a point whose smoothed top-class probability is at least `p1` and
//! runner-up probability at most `p2`, an ℓ₂ perturbation of size `ε` is
//! absorbed once the equivalent additive noise level satisfies
//! `σ(t) ≥ 2ε / (Φ⁻¹(p1) − Φ⁻¹(p2))`. With `M = ln(1 + (2ε/Δ)²)` this is
//! `∫₀ᵗ β ≥ M`, whose root is `t_min`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::{beta::beta_reg, erf::erfc};

use crate::embed::{CosineClassifier, Encoder};
use crate::error::{Error, Result};
use crate::rng::NoiseStream;
use crate::schedule::LinearSchedule;
use crate::sde::StateVector;

pub const DEFAULT_CONFIDENCE: f64 = 0.999;

/// Monte-Carlo samples per parallel block.
const BLOCK: usize = 512;

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Inverse standard normal CDF (Wichura's AS241, PPND16).
#[allow(clippy::excessive_precision)]
pub fn gaussian_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain { what: "p", value: p, domain: "(0, 1)" });
    }
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        let num = ((((((2509.0809287301226727 * r + 33430.575583588128105) * r + 67265.770927008700853) * r
            + 45921.953931549871457)
            * r
            + 13731.693765509461125)
            * r
            + 1971.5909503065514427)
            * r
            + 133.14166789178437745)
            * r
            + 3.387132872796366608;
        let den = ((((((5226.495278852545925 * r + 28729.085735721942674) * r + 39307.89580009271061) * r
            + 21213.794301586595867)
            * r
            + 5394.1960214247511077)
            * r
            + 687.1870074920579083)
            * r
            + 42.313330701600911252)
            * r
            + 1.0;
        return Ok(q * num / den);
    }
    let r = if q < 0.0 { p } else { 1.0 - p };
    let r = (-r.ln()).sqrt();
    let z = if r <= 5.0 {
        let r = r - 1.6;
        let num = ((((((7.7454501427834140764e-4 * r + 0.0227238449892691845833) * r + 0.24178072517745061177) * r
            + 1.27045825245236838258)
            * r
            + 3.64784832476320460504)
            * r
            + 5.7694972214606914055)
            * r
            + 4.6303378461565452959)
            * r
            + 1.42343711074968357734;
        let den = ((((((1.05075007164441684324e-9 * r + 5.475938084995344946e-4) * r + 0.0151986665636164571966)
            * r
            + 0.14810397642748007459)
            * r
            + 0.68976733498510000455)
            * r
            + 1.6763848301838038494)
            * r
            + 2.05319162663775882187)
            * r
            + 1.0;
        num / den
    } else {
        let r = r - 5.0;
        let num = ((((((2.01033439929228813265e-7 * r + 2.71155556874348757815e-5) * r + 0.0012426609473880784386)
            * r
            + 0.026532189526576123093)
            * r
            + 0.29656057182850489123)
            * r
            + 1.7848265399172913358)
            * r
            + 5.4637849111641143699)
            * r
            + 6.6579046435011037772;
        let den = ((((((2.04426310338993978564e-15 * r + 1.4215117583164458887e-7) * r + 1.8463183175100546818e-5)
            * r
            + 7.868691311456132591e-4)
            * r
            + 0.0148753612908506148525)
            * r
            + 0.13692988092273580531)
            * r
            + 0.59983220655588793769)
            * r
            + 1.0;
        num / den
    };
    Ok(if q < 0.0 { -z } else { z })
}

/// `x` with `I_x(a, b) = target`, by bisection.
fn beta_quantile(target: f64, a: f64, b: f64) -> f64 {
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if beta_reg(a, b, mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-15 {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// One-sided Clopper–Pearson bounds `(lower, upper)` on a binomial
/// proportion, each holding with probability `confidence`.
pub fn clopper_pearson(k: usize, n: usize, confidence: f64) -> Result<(f64, f64)> {
    if n == 0 || k > n {
        return Err(Error::InvalidParameter(format!("need 0 <= k <= n and n >= 1, got k={k}, n={n}")));
    }
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::Domain { what: "confidence", value: confidence, domain: "(0, 1)" });
    }
    let alpha = 1.0 - confidence;
    let (kf, nf) = (k as f64, n as f64);
    let lower = if k == 0 { 0.0 } else { beta_quantile(alpha, kf, nf - kf + 1.0) };
    let upper = if k == n { 1.0 } else { beta_quantile(1.0 - alpha, kf + 1.0, nf - kf) };
    Ok((lower, upper))
}

/// Class counts of `x + σ z`, `z ~ N(0, I)`, over `n` draws.
fn smoothed_counts<E: Encoder>(
    clf: &CosineClassifier<E>,
    x: &[f64],
    sigma: f64,
    n: usize,
    noise: &NoiseStream,
) -> Result<Vec<usize>> {
    let k = clf.n_classes();
    let blocks = n.div_ceil(BLOCK);
    let partial = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut g = noise.substream(b as u64, "smooth/block").source();
            let mut counts = vec![0usize; k];
            let mut buf = vec![0.0; x.len()];
            for _ in 0..BLOCK.min(n - b * BLOCK) {
                g.fill(&mut buf);
                for (v, xi) in buf.iter_mut().zip(x) {
                    *v = xi + sigma * *v;
                }
                counts[clf.classify(&buf)?] += 1;
            }
            Ok(counts)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(partial.into_iter().fold(vec![0; k], |mut acc, c| {
        for (a, ci) in acc.iter_mut().zip(c) {
            *a += ci;
        }
        acc
    }))
}

fn runner_up(counts: &[usize], k1: usize) -> usize {
    counts.iter().enumerate().filter(|(i, _)| *i != k1).map(|(_, &c)| c).max().unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothingPoint {
    pub t: f64,
    pub sigma: f64,
    pub counts: Vec<usize>,
    pub p1_lower: f64,
    pub p2_upper: f64,
    /// `p1_lower > p2_upper` at this `t`.
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothingEstimate {
    /// The unsmoothed classification of `x`.
    pub k1: usize,
    /// Worst case over the grid.
    pub p1_lower: f64,
    pub p2_upper: f64,
    pub n_samples: usize,
    pub confidence: f64,
    pub t_grid: Vec<f64>,
    pub per_t: Vec<SmoothingPoint>,
    /// Grid times at which the probability-gap condition held.
    pub holds_on: Vec<f64>,
}

impl SmoothingEstimate {
    pub fn holds_everywhere(&self) -> bool {
        self.holds_on.len() == self.t_grid.len()
    }
}

/// Monte-Carlo bounds on the smoothed class probabilities of `x` under
/// noise of level `σ(t)` for each `t` in the grid.
pub fn estimate_class_probs<E: Encoder>(
    clf: &CosineClassifier<E>,
    x: &StateVector,
    schedule: &LinearSchedule,
    t_grid: &[f64],
    n_mc: usize,
    confidence: f64,
    noise: &NoiseStream,
) -> Result<SmoothingEstimate> {
    if n_mc < 100 {
        return Err(Error::InvalidParameter(format!("n_mc must be at least 100, got {n_mc}")));
    }
    if t_grid.is_empty() {
        return Err(Error::InvalidParameter("t_grid is empty".into()));
    }
    let k1 = clf.classify(x)?;
    let mut per_t = Vec::with_capacity(t_grid.len());
    for (gi, &t) in t_grid.iter().enumerate() {
        let sigma = schedule.sigma(t)?;
        let counts = smoothed_counts(clf, x, sigma, n_mc, &noise.substream(gi as u64, "smooth/t"))?;
        let (p1_lower, _) = clopper_pearson(counts[k1], n_mc, confidence)?;
        let (_, p2_upper) = clopper_pearson(runner_up(&counts, k1), n_mc, confidence)?;
        per_t.push(SmoothingPoint { t, sigma, counts, p1_lower, p2_upper, holds: p1_lower > p2_upper });
    }
    Ok(SmoothingEstimate {
        k1,
        p1_lower: per_t.iter().map(|p| p.p1_lower).fold(f64::INFINITY, f64::min),
        p2_upper: per_t.iter().map(|p| p.p2_upper).fold(f64::NEG_INFINITY, f64::max),
        n_samples: n_mc,
        confidence,
        t_grid: t_grid.to_vec(),
        holds_on: per_t.iter().filter(|p| p.holds).map(|p| p.t).collect(),
        per_t,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    #[serde(rename = "M")]
    pub m: f64,
    pub t_min: f64,
    /// `β_min ≥ M` and `t_min ≤ 1`.
    pub valid: bool,
    pub eps_l2: f64,
    pub p1: f64,
    pub p2: f64,
    /// `Φ⁻¹(p1) − Φ⁻¹(p2)`.
    pub quantile_gap: f64,
    pub schedule: LinearSchedule,
}

impl Certificate {
    /// Certified ℓ₂ radius of the noised classifier at time `t`.
    pub fn radius_at(&self, t: f64) -> Result<f64> {
        Ok(self.schedule.sigma(t)? / 2.0 * self.quantile_gap)
    }

    pub fn radius_table(&self, grid: &[f64]) -> Result<Vec<(f64, f64)>> {
        grid.iter().map(|&t| Ok((t, self.radius_at(t)?))).collect()
    }
}

pub fn compute_certificate(schedule: &LinearSchedule, eps_l2: f64, p1: f64, p2: f64) -> Result<Certificate> {
    if !(eps_l2 >= 0.0) || !eps_l2.is_finite() {
        return Err(Error::Domain { what: "eps_l2", value: eps_l2, domain: "[0, inf)" });
    }
    for (what, p) in [("p1", p1), ("p2", p2)] {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::Domain { what, value: p, domain: "(0, 1)" });
        }
    }
    if p1 <= p2 {
        return Err(Error::DegenerateMargin { p1, p2 });
    }
    let gap = gaussian_quantile(p1)? - gaussian_quantile(p2)?;
    let m = (2.0 * eps_l2 / gap).powi(2).ln_1p();
    let (bmin, bmax) = (schedule.beta_min(), schedule.beta_max());
    let t_min = 2.0 * m / ((bmin * bmin + 2.0 * (bmax - bmin) * m).sqrt() + bmin);
    Ok(Certificate {
        m,
        t_min,
        valid: bmin >= m && t_min <= 1.0,
        eps_l2,
        p1,
        p2,
        quantile_gap: gap,
        schedule: *schedule,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verification {
    pub t: f64,
    pub eps_l2: f64,
    pub clean_label: usize,
    pub counts: Vec<usize>,
    pub majority: usize,
    pub p_clean_lower: f64,
    pub p_other_upper: f64,
    pub pass: bool,
}

/// Samples the forward marginal of `x + eps_l2 · direction` at time `t`
/// (rescaled by `1/√α`, which leaves the argmax unchanged) and checks that
/// the clean label wins with a Clopper–Pearson margin.
#[allow(clippy::too_many_arguments)]
pub fn verify_certificate<E: Encoder>(
    clf: &CosineClassifier<E>,
    x: &StateVector,
    direction: &[f64],
    eps_l2: f64,
    t: f64,
    schedule: &LinearSchedule,
    n_mc: usize,
    noise: &NoiseStream,
) -> Result<Verification> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::Domain { what: "t", value: t, domain: "(0, 1]" });
    }
    x.check_dim(direction.len())?;
    let norm = crate::sde::norm(direction);
    if (norm - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidParameter(format!("direction must have unit norm, got {norm}")));
    }
    if n_mc == 0 {
        return Err(Error::InvalidParameter("n_mc must be positive".into()));
    }
    let clean_label = clf.classify(x)?;
    let x_adv: Vec<f64> = x.iter().zip(direction).map(|(a, d)| a + eps_l2 * d).collect();
    let counts = smoothed_counts(clf, &x_adv, schedule.sigma(t)?, n_mc, noise)?;
    let majority = crate::embed::argmax(&counts.iter().map(|&c| c as f64).collect::<Vec<_>>());
    let (p_clean_lower, _) = clopper_pearson(counts[clean_label], n_mc, DEFAULT_CONFIDENCE)?;
    let (_, p_other_upper) = clopper_pearson(runner_up(&counts, clean_label), n_mc, DEFAULT_CONFIDENCE)?;
    Ok(Verification {
        t,
        eps_l2,
        clean_label,
        majority,
        pass: majority == clean_label && p_clean_lower > p_other_upper,
        p_clean_lower,
        p_other_upper,
        counts,
    })
}
