//! Numerical checks of the embedding-convergence results.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embed::Encoder;
use crate::error::{Error, Result};
use crate::rng::NoiseStream;
use crate::schedule::LinearSchedule;
use crate::sde::{forward_with_noise, norm, transition_between, StateVector};

/// Power-iteration refinements applied to each sampled secant direction.
const POWER_STEPS: usize = 8;

fn l2_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzEstimate {
    pub estimate: f64,
    pub n_pairs: usize,
    pub skipped: usize,
}

/// Largest observed `‖φ(u) − φ(v)‖ / ‖u − v‖` over secants in `[lo, hi]^d`.
///
/// Each random pair `(u, v)` contributes its own ratio, and its direction is
/// also sharpened by a few power steps on `JᵀJ` at the midpoint (JVP by
/// central differences, VJP by `pullback`); the sharpened secant's ratio is
/// a genuine difference quotient, so the estimate never exceeds the true
/// constant.
pub fn lipschitz_estimate(
    encoder: &dyn Encoder,
    lo: f64,
    hi: f64,
    n_pairs: usize,
    noise: &NoiseStream,
) -> Result<LipschitzEstimate> {
    if n_pairs < 100 {
        return Err(Error::InvalidParameter(format!("n_pairs must be at least 100, got {n_pairs}")));
    }
    if !(lo < hi) {
        return Err(Error::InvalidParameter(format!("empty sample region [{lo}, {hi}]")));
    }
    let d = encoder.input_dim();
    let h = 1e-4 * (hi - lo);
    let results = (0..n_pairs)
        .into_par_iter()
        .map(|i| -> Result<Option<f64>> {
            let mut g = noise.substream(i as u64, "lipschitz/pair").source();
            let u: Vec<f64> = (0..d).map(|_| g.uniform(lo, hi)).collect();
            let v: Vec<f64> = (0..d).map(|_| g.uniform(lo, hi)).collect();
            let dist = l2_diff(&u, &v);
            if dist == 0.0 {
                return Ok(None);
            }
            let mut best = l2_diff(&encoder.encode(&u)?, &encoder.encode(&v)?) / dist;
            let mid: Vec<f64> = u.iter().zip(&v).map(|(a, b)| 0.5 * (a + b)).collect();
            let mut w: Vec<f64> = u.iter().zip(&v).map(|(a, b)| (a - b) / dist).collect();
            for _ in 0..POWER_STEPS {
                let plus: Vec<f64> = mid.iter().zip(&w).map(|(m, wi)| m + h * wi).collect();
                let minus: Vec<f64> = mid.iter().zip(&w).map(|(m, wi)| m - h * wi).collect();
                let (ep, em) = (encoder.encode(&plus)?, encoder.encode(&minus)?);
                best = best.max(l2_diff(&ep, &em) / (2.0 * h));
                let jv: Vec<f64> = ep.iter().zip(&em).map(|(a, b)| (a - b) / (2.0 * h)).collect();
                let jtjv = encoder.pullback(&mid, &jv)?;
                let n = norm(&jtjv);
                if n == 0.0 || !n.is_finite() {
                    break;
                }
                w = jtjv.into_iter().map(|x| x / n).collect();
            }
            Ok(Some(best))
        })
        .collect::<Result<Vec<_>>>()?;
    let skipped = results.iter().filter(|r| r.is_none()).count();
    let estimate = results.into_iter().flatten().fold(0.0, f64::max);
    Ok(LipschitzEstimate { estimate, n_pairs, skipped })
}

/// How the state at `t + δ` is coupled to the state at `t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Coupling {
    /// Both states share one Gaussian draw through the closed-form marginal.
    #[default]
    Shared,
    /// `x(t + δ)` is drawn from the transition kernel given `x(t)`.
    Markov,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftCurve {
    pub t: Vec<f64>,
    pub estimate: Vec<f64>,
    pub std_err: Vec<f64>,
    pub bound: Vec<f64>,
    pub delta: f64,
    pub n_mc: usize,
    pub lipschitz: f64,
    pub coupling: Coupling,
    /// The bound column is `bound_constant · δ · β(t) · √(α/(1−α))`.
    pub bound_constant: f64,
    pub bound_formula: String,
}

impl DriftCurve {
    pub fn dominated(&self) -> bool {
        self.estimate.iter().zip(&self.bound).all(|(e, b)| e <= b)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,estimate,bound\n");
        for i in 0..self.t.len() {
            s.push_str(&format!("{},{},{}\n", self.t[i], self.estimate[i], self.bound[i]));
        }
        s
    }
}

fn pair_states(
    x0: &StateVector,
    t1: f64,
    t2: f64,
    schedule: &LinearSchedule,
    coupling: Coupling,
    noise: &NoiseStream,
) -> Result<(StateVector, StateVector)> {
    let mut g = noise.source();
    let eps = g.vector(x0.dim());
    let a = forward_with_noise(x0, &eps, t1, schedule)?;
    let b = match coupling {
        Coupling::Shared => forward_with_noise(x0, &eps, t2, schedule)?,
        Coupling::Markov if t2 == t1 => a.clone(),
        Coupling::Markov => transition_between(&a, &g.vector(x0.dim()), t1, t2, schedule)?,
    };
    Ok((a, b))
}

/// Mean and standard error of `‖φ(x(t1)) − φ(x(t2))‖` over `n_mc` coupled
/// draws.
#[allow(clippy::too_many_arguments)]
pub fn mean_embedding_gap(
    encoder: &dyn Encoder,
    x0: &StateVector,
    t1: f64,
    t2: f64,
    schedule: &LinearSchedule,
    coupling: Coupling,
    n_mc: usize,
    noise: &NoiseStream,
) -> Result<(f64, f64)> {
    if t2 < t1 {
        return Err(Error::InvalidParameter(format!("need t1 <= t2, got ({t1}, {t2})")));
    }
    let gaps = (0..n_mc)
        .into_par_iter()
        .map(|j| {
            let (a, b) = pair_states(x0, t1, t2, schedule, coupling, &noise.substream(j as u64, "drift/sample"))?;
            Ok(l2_diff(&encoder.encode(&a)?, &encoder.encode(&b)?))
        })
        .collect::<Result<Vec<f64>>>()?;
    let n = gaps.len() as f64;
    let mean = gaps.iter().sum::<f64>() / n;
    let var = if gaps.len() > 1 { gaps.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    Ok((mean, (var / n).sqrt()))
}

/// Expected embedding change over one step of size `δ` at each grid time,
/// with the bound `L·√d/2 · δ · β(t)·√(α/(1−α))`.
///
/// Under the shared coupling the bound is rigorous for inputs in the unit
/// box: the path speed satisfies `E‖ẋ‖² ≤ d·f(t)²/4` with `f` the monitor
/// function, and `f` is decreasing, so the expected chord over `[t, t+δ]` is
/// at most `√d·δ·f(t)/2`.
#[allow(clippy::too_many_arguments)]
pub fn embedding_drift_curve(
    encoder: &dyn Encoder,
    x0: &StateVector,
    schedule: &LinearSchedule,
    delta: f64,
    t_grid: &[f64],
    n_mc: usize,
    lipschitz: f64,
    coupling: Coupling,
    noise: &NoiseStream,
) -> Result<DriftCurve> {
    if n_mc < 100 {
        return Err(Error::InvalidParameter(format!("n_mc must be at least 100, got {n_mc}")));
    }
    if !(delta > 0.0) {
        return Err(Error::Domain { what: "delta", value: delta, domain: "(0, 1)" });
    }
    for &t in t_grid {
        if !(t > 0.0) || t + delta > 1.0 + 1e-12 {
            return Err(Error::Domain { what: "t + delta", value: t + delta, domain: "t > 0, t + delta <= 1" });
        }
    }
    let constant = lipschitz * (x0.dim() as f64).sqrt() / 2.0;
    let mut curve = DriftCurve {
        t: t_grid.to_vec(),
        estimate: Vec::new(),
        std_err: Vec::new(),
        bound: Vec::new(),
        delta,
        n_mc,
        lipschitz,
        coupling,
        bound_constant: constant,
        bound_formula: "L * sqrt(d) / 2 * delta * beta(t) * sqrt(alpha(t) / (1 - alpha(t)))".into(),
    };
    for (i, &t) in t_grid.iter().enumerate() {
        let t2 = (t + delta).min(1.0);
        let (m, se) =
            mean_embedding_gap(encoder, x0, t, t2, schedule, coupling, n_mc, &noise.substream(i as u64, "drift/t"))?;
        curve.estimate.push(m);
        curve.std_err.push(se);
        curve.bound.push(constant * delta * schedule.monitor_f(t)?);
    }
    Ok(curve)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitorReport {
    pub pass: bool,
    pub points: usize,
    pub lo: f64,
    pub hi: f64,
    /// Largest `f(t_{i+1}) / f(t_i)`; below 1 when strictly decreasing.
    pub worst_adjacent_ratio: f64,
    pub log_derivative_negative: bool,
    pub max_log_derivative: f64,
    /// `β_max = β_min`; `f` still decreases because `σ` grows.
    pub constant_schedule: bool,
}

/// Checks that the monitor `f(t) = β(t)·√(α/(1−α))` strictly decreases on an
/// evenly spaced grid over `[1e-3, 1 − 1e-3]` and that its log-derivative is
/// negative at every grid point.
pub fn monitor_decreasing_check(schedule: &LinearSchedule, resolution: usize) -> Result<MonitorReport> {
    if resolution < 100 {
        return Err(Error::InvalidParameter(format!("resolution must be at least 100, got {resolution}")));
    }
    let (lo, hi) = (1e-3, 1.0 - 1e-3);
    let grid: Vec<f64> = (0..resolution).map(|i| lo + (hi - lo) * i as f64 / (resolution - 1) as f64).collect();
    let f = grid.iter().map(|&t| schedule.monitor_f(t)).collect::<Result<Vec<_>>>()?;
    let g = grid.iter().map(|&t| schedule.monitor_log_derivative(t)).collect::<Result<Vec<_>>>()?;
    let worst = f.windows(2).map(|w| w[1] / w[0]).fold(f64::NEG_INFINITY, f64::max);
    let strictly = f.windows(2).all(|w| w[1] < w[0]);
    let max_g = g.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(MonitorReport {
        pass: strictly && max_g < 0.0,
        points: resolution,
        lo,
        hi,
        worst_adjacent_ratio: worst,
        log_derivative_negative: max_g < 0.0,
        max_log_derivative: max_g,
        constant_schedule: schedule.beta_max() == schedule.beta_min(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub pairs: Vec<(f64, f64)>,
    pub estimates: Vec<f64>,
    pub decreasing: bool,
    pub ceiling: f64,
    pub pass: bool,
}

/// Estimates `E‖φ(x(t1)) − φ(x(t2))‖` (shared coupling) along pairs that
/// approach `(1, 1)`; passes when the estimates strictly decrease and the
/// last one is below `ceiling`.
#[allow(clippy::too_many_arguments)]
pub fn convergence_check(
    encoder: &dyn Encoder,
    x0: &StateVector,
    schedule: &LinearSchedule,
    pairs: &[(f64, f64)],
    n_mc: usize,
    ceiling: f64,
    noise: &NoiseStream,
) -> Result<ConvergenceReport> {
    if pairs.is_empty() {
        return Err(Error::InvalidParameter("no time pairs".into()));
    }
    let mut estimates = Vec::with_capacity(pairs.len());
    for (i, &(t1, t2)) in pairs.iter().enumerate() {
        for t in [t1, t2] {
            if !(t > 0.0 && t <= 1.0) {
                return Err(Error::Domain { what: "t", value: t, domain: "(0, 1]" });
            }
        }
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let (m, _) = mean_embedding_gap(
            encoder,
            x0,
            lo,
            hi,
            schedule,
            Coupling::Shared,
            n_mc,
            &noise.substream(i as u64, "convergence/pair"),
        )?;
        estimates.push(m);
    }
    let decreasing = estimates.windows(2).all(|w| w[1] < w[0]);
    let last = *estimates.last().expect("non-empty");
    Ok(ConvergenceReport { pairs: pairs.to_vec(), estimates, decreasing, ceiling, pass: decreasing && last <= ceiling })
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch { expected: x.len(), actual: y.len() });
    }
    if x.len() < 2 {
        return Err(Error::InvalidParameter("spearman needs at least two points".into()));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (vx * vy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::LinearEncoder;
    use approx::assert_relative_eq;

    struct Constant;

    impl Encoder for Constant {
        fn input_dim(&self) -> usize {
            4
        }
        fn output_dim(&self) -> usize {
            2
        }
        fn encode(&self, _x: &[f64]) -> Result<Vec<f64>> {
            Ok(vec![1.0, 2.0])
        }
        fn pullback(&self, _x: &[f64], _c: &[f64]) -> Result<Vec<f64>> {
            Ok(vec![0.0; 4])
        }
    }

    fn identity(d: usize) -> LinearEncoder {
        LinearEncoder::from_rows((0..d).map(|i| (0..d).map(|j| f64::from(u8::from(i == j))).collect()).collect())
            .unwrap()
    }

    #[test]
    fn identity_is_one_lipschitz() {
        let l = lipschitz_estimate(&identity(5), -1.0, 1.0, 200, &NoiseStream::new(1, 0, "l")).unwrap();
        assert_relative_eq!(l.estimate, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn linear_estimate_approaches_operator_norm() {
        let enc = LinearEncoder::random(16, 4, 3).unwrap();
        let op = enc.operator_norm();
        let l = lipschitz_estimate(&enc, -1.0, 1.0, 1000, &NoiseStream::new(1, 0, "l")).unwrap();
        assert!(l.estimate <= op * (1.0 + 1e-9));
        assert!(l.estimate >= 0.99 * op, "{} vs {op}", l.estimate);
        let l2 = lipschitz_estimate(&enc.scaled(2.0), -1.0, 1.0, 1000, &NoiseStream::new(1, 0, "l")).unwrap();
        assert_relative_eq!(l2.estimate, 2.0 * l.estimate, max_relative = 1e-9);
    }

    #[test]
    fn constant_encoder_has_no_drift() {
        let x0 = StateVector::new(vec![0.1, 0.2, -0.3, 0.4]).unwrap();
        let s = LinearSchedule::default();
        let curve = embedding_drift_curve(
            &Constant,
            &x0,
            &s,
            0.01,
            &[0.1, 0.5],
            100,
            0.0,
            Coupling::Markov,
            &NoiseStream::new(1, 0, "d"),
        )
        .unwrap();
        assert!(curve.estimate.iter().all(|&e| e == 0.0));
        let conv =
            convergence_check(&Constant, &x0, &s, &[(0.9, 0.91), (0.99, 1.0)], 100, 1.0, &NoiseStream::new(1, 0, "c"))
                .unwrap();
        assert!(conv.estimates.iter().all(|&e| e == 0.0));
    }

    #[test]
    fn equal_times_give_zero_gap() {
        let enc = LinearEncoder::random(4, 2, 1).unwrap();
        let x0 = StateVector::new(vec![0.1, 0.2, -0.3, 0.4]).unwrap();
        let s = LinearSchedule::default();
        for c in [Coupling::Shared, Coupling::Markov] {
            let (m, _) = mean_embedding_gap(&enc, &x0, 0.5, 0.5, &s, c, 100, &NoiseStream::new(1, 0, "g")).unwrap();
            assert_eq!(m, 0.0);
        }
    }

    #[test]
    fn grid_must_fit_delta() {
        let enc = LinearEncoder::random(4, 2, 1).unwrap();
        let x0 = StateVector::zeros(4);
        let s = LinearSchedule::default();
        let r = embedding_drift_curve(
            &enc,
            &x0,
            &s,
            0.02,
            &[0.99],
            100,
            1.0,
            Coupling::Shared,
            &NoiseStream::new(1, 0, "d"),
        );
        assert!(r.is_err());
    }

    #[test]
    fn monitor_check_passes_by_default() {
        let r = monitor_decreasing_check(&LinearSchedule::default(), 10_000).unwrap();
        assert!(r.pass && r.log_derivative_negative);
        assert!(r.worst_adjacent_ratio < 1.0);
        assert!(!r.constant_schedule);
    }

    #[test]
    fn monitor_check_on_constant_schedule() {
        let r = monitor_decreasing_check(&LinearSchedule::new(2.0, 2.0).unwrap(), 1000).unwrap();
        assert!(r.pass);
        assert!(r.constant_schedule);
    }

    #[test]
    fn spearman_basics() {
        assert_relative_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 35.0]).unwrap(), 1.0);
        assert_relative_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        // textbook tie example: ranks (1.5, 1.5, 3) vs (1, 2, 3)
        assert_relative_eq!(spearman(&[1.0, 1.0, 2.0], &[1.0, 2.0, 3.0]).unwrap(), 0.8660254037844386, epsilon = 1e-12);
        assert!(spearman(&[1.0], &[1.0]).is_err());
    }
}
