//! Forward diffusion, analytic Gaussian-mixture marginals and scores, and
//! reverse-time integration of the VP SDE.

use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{check_unit_interval, Error, Result};
use crate::rng::NoiseStream;
use crate::schedule::LinearSchedule;

/// A point in data space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StateVector(Vec<f64>);

impl StateVector {
    pub fn new(components: Vec<f64>) -> Result<Self> {
        if components.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("state vector"));
        }
        Ok(Self(components))
    }

    /// Ingestion path for data: values are clamped into `[-1, 1]` so that
    /// `|x|^2 <= d` holds for every stored input.
    pub fn clamped(components: Vec<f64>) -> Result<Self> {
        let v = Self::new(components)?;
        Ok(Self(v.0.into_iter().map(|c| c.clamp(-1.0, 1.0)).collect()))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn linf_distance(&self, other: &StateVector) -> f64 {
        self.0.iter().zip(&other.0).fold(0.0, |m, (a, b)| f64::max(m, (a - b).abs()))
    }

    pub fn l2_distance(&self, other: &StateVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    }

    pub fn in_box(&self) -> bool {
        self.0.iter().all(|v| (-1.0..=1.0).contains(v))
    }

    pub(crate) fn from_raw(components: Vec<f64>) -> Self {
        Self(components)
    }

    pub(crate) fn check_dim(&self, expected: usize) -> Result<()> {
        if self.dim() == expected {
            Ok(())
        } else {
            Err(Error::DimensionMismatch { expected, actual: self.dim() })
        }
    }
}

impl Deref for StateVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl AsRef<[f64]> for StateVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Diagonal-covariance Gaussian mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGmm", into = "RawGmm")]
pub struct GmmDistribution {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    vars: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct RawGmm {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    vars: Vec<Vec<f64>>,
}

impl TryFrom<RawGmm> for GmmDistribution {
    type Error = Error;

    fn try_from(raw: RawGmm) -> Result<Self> {
        GmmDistribution::new(raw.weights, raw.means, raw.vars)
    }
}

impl From<GmmDistribution> for RawGmm {
    fn from(g: GmmDistribution) -> Self {
        RawGmm { weights: g.weights, means: g.means, vars: g.vars }
    }
}

impl GmmDistribution {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, vars: Vec<Vec<f64>>) -> Result<Self> {
        let k = weights.len();
        if k == 0 {
            return Err(Error::InvalidParameter("mixture needs at least one component".into()));
        }
        if means.len() != k || vars.len() != k {
            return Err(Error::InvalidParameter(format!(
                "mixture has {k} weights, {} means and {} variance vectors",
                means.len(),
                vars.len()
            )));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::InvalidParameter("mixture weights must be positive".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParameter(format!("mixture weights sum to {total}, expected 1")));
        }
        let dim = means[0].len();
        if dim == 0 {
            return Err(Error::InvalidParameter("mixture dimension must be positive".into()));
        }
        for (m, v) in means.iter().zip(&vars) {
            if m.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, actual: m.len() });
            }
            if v.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, actual: v.len() });
            }
            if m.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("mixture mean"));
            }
            if v.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
                return Err(Error::InvalidParameter("mixture variances must be positive".into()));
            }
        }
        Ok(Self { weights, means, vars })
    }

    /// Equal-weight mixture with isotropic variance per component.
    pub fn isotropic(means: Vec<Vec<f64>>, var: f64) -> Result<Self> {
        let k = means.len();
        let vars = means.iter().map(|m| vec![var; m.len()]).collect();
        Self::new(vec![1.0 / k as f64; k], means, vars)
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn vars(&self) -> &[Vec<f64>] {
        &self.vars
    }

    /// Per-component log of `w_k N(x; mu_k, diag v_k)`.
    fn component_log_terms(&self, x: &[f64]) -> Vec<f64> {
        let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        self.weights
            .iter()
            .zip(self.means.iter().zip(&self.vars))
            .map(|(w, (m, v))| {
                let mut acc = w.ln();
                for ((xi, mi), vi) in x.iter().zip(m).zip(v) {
                    let r = xi - mi;
                    acc -= 0.5 * r * r / vi + 0.5 * vi.ln() + half_log_2pi;
                }
                acc
            })
            .collect()
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        self.check_point(x)?;
        Ok(log_sum_exp(&self.component_log_terms(x)))
    }

    /// Posterior component probabilities given `x`.
    pub fn responsibilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_point(x)?;
        let terms = self.component_log_terms(x);
        let lse = log_sum_exp(&terms);
        Ok(terms.iter().map(|t| (t - lse).exp()).collect())
    }

    /// `grad_x log p(x)`, stabilized through log-sum-exp responsibilities.
    pub fn score(&self, x: &[f64]) -> Result<Vec<f64>> {
        let resp = self.responsibilities(x)?;
        let mut out = vec![0.0; x.len()];
        for (r, (m, v)) in resp.iter().zip(self.means.iter().zip(&self.vars)) {
            for (o, ((xi, mi), vi)) in out.iter_mut().zip(x.iter().zip(m).zip(v)) {
                *o -= r * (xi - mi) / vi;
            }
        }
        Ok(out)
    }

    /// Draws one point and the index of the component that generated it.
    pub fn sample(&self, noise: &mut crate::rng::Gaussians) -> (Vec<f64>, usize) {
        let u = noise.uniform(0.0, 1.0);
        let mut acc = 0.0;
        let mut k = self.weights.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        let x = self.means[k].iter().zip(&self.vars[k]).map(|(m, v)| m + v.sqrt() * noise.normal()).collect();
        (x, k)
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), actual: x.len() });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("score input"));
        }
        Ok(())
    }
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Exact marginal `p_t` of a mixture pushed through the forward process:
/// means scale by `sqrt(alpha)`, variances become `alpha v + 1 - alpha`.
pub fn gmm_marginal(p0: &GmmDistribution, t: f64, schedule: &LinearSchedule) -> Result<GmmDistribution> {
    let alpha = schedule.alpha(t)?;
    let one_minus = schedule.one_minus_alpha(t)?;
    let scale = alpha.sqrt();
    Ok(GmmDistribution {
        weights: p0.weights.clone(),
        means: p0.means.iter().map(|m| m.iter().map(|v| scale * v).collect()).collect(),
        vars: p0.vars.iter().map(|v| v.iter().map(|vi| alpha * vi + one_minus).collect()).collect(),
    })
}

pub fn analytic_score(p0: &GmmDistribution, x: &[f64], t: f64, schedule: &LinearSchedule) -> Result<Vec<f64>> {
    gmm_marginal(p0, t, schedule)?.score(x)
}

/// Anything that can act as `grad_x log p_t(x)` for the reverse process.
pub trait ScoreFn: Sync {
    fn score(&self, x: &[f64], t: f64) -> Result<Vec<f64>>;
}

impl<F> ScoreFn for F
where
    F: Fn(&[f64], f64) -> Vec<f64> + Sync,
{
    fn score(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        Ok(self(x, t))
    }
}

/// Closed-form score of a mixture data distribution.
#[derive(Debug, Clone)]
pub struct GmmScore {
    pub p0: GmmDistribution,
    pub schedule: LinearSchedule,
}

impl ScoreFn for GmmScore {
    fn score(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        analytic_score(&self.p0, x, t, &self.schedule)
    }
}

/// `sqrt(alpha(t)) x0 + sqrt(1 - alpha(t)) eps` for a given `eps`.
pub fn forward_with_noise(x0: &[f64], eps: &[f64], t: f64, schedule: &LinearSchedule) -> Result<StateVector> {
    if eps.len() != x0.len() {
        return Err(Error::DimensionMismatch { expected: x0.len(), actual: eps.len() });
    }
    let a = schedule.alpha(t)?.sqrt();
    let s = schedule.one_minus_alpha(t)?.sqrt();
    Ok(StateVector::from_raw(x0.iter().zip(eps).map(|(x, e)| a * x + s * e).collect()))
}

/// One draw from the closed-form forward marginal at time `t`.
pub fn forward_sample(x0: &StateVector, t: f64, schedule: &LinearSchedule, noise: &NoiseStream) -> Result<StateVector> {
    check_unit_interval("t", t)?;
    let eps = noise.source().vector(x0.dim());
    forward_with_noise(x0, &eps, t, schedule)
}

/// Exact VP transition kernel from `t` to `t + dt`, given the standard
/// normal draw `eps`.
pub fn transition_with_noise(
    x_t: &[f64],
    eps: &[f64],
    t: f64,
    dt: f64,
    schedule: &LinearSchedule,
) -> Result<StateVector> {
    if !(dt > 0.0) {
        return Err(Error::Domain { what: "dt", value: dt, domain: "(0, 1]" });
    }
    transition_between(x_t, eps, t, t + dt, schedule)
}

/// Transition kernel between two explicit times.
pub(crate) fn transition_between(
    x_t: &[f64],
    eps: &[f64],
    from: f64,
    to: f64,
    schedule: &LinearSchedule,
) -> Result<StateVector> {
    if eps.len() != x_t.len() {
        return Err(Error::DimensionMismatch { expected: x_t.len(), actual: eps.len() });
    }
    let ratio = schedule.kernel_ratio(from, to)?;
    // 1 - ratio without cancellation for tiny steps
    let (a, s) = (ratio.sqrt(), (-ratio.ln().exp_m1()).sqrt());
    Ok(StateVector::from_raw(x_t.iter().zip(eps).map(|(x, e)| a * x + s * e).collect()))
}

pub fn transition_step(
    x_t: &StateVector,
    t: f64,
    dt: f64,
    schedule: &LinearSchedule,
    noise: &NoiseStream,
) -> Result<StateVector> {
    let eps = noise.source().vector(x_t.dim());
    transition_with_noise(x_t, &eps, t, dt, schedule)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReverseMode {
    #[default]
    Stochastic,
    ProbabilityFlow,
}

/// Euler(-Maruyama) integration of the reverse-time process from `t_start`
/// down to 0 in `n_steps` uniform steps.
///
/// Stochastic mode follows `dx = [f - g^2 score] dt + g dw`; probability-flow
/// mode follows `dx = [f - g^2 score / 2] dt` and consumes no noise.
pub fn reverse_integrate(
    x_t: &StateVector,
    t_start: f64,
    schedule: &LinearSchedule,
    score_fn: &dyn ScoreFn,
    n_steps: usize,
    mode: ReverseMode,
    noise: &NoiseStream,
) -> Result<StateVector> {
    if !(t_start > 0.0 && t_start <= 1.0) {
        return Err(Error::Domain { what: "t_start", value: t_start, domain: "(0, 1]" });
    }
    if n_steps == 0 {
        return Err(Error::InvalidParameter("reverse integration needs at least one step".into()));
    }
    let dt = t_start / n_steps as f64;
    let mut gauss = noise.source();
    let mut x = x_t.as_slice().to_vec();
    let mut z = vec![0.0; x.len()];
    for step in 0..n_steps {
        let t = t_start - step as f64 * dt;
        let beta = schedule.beta(t)?;
        let score = score_fn.score(&x, t)?;
        if score.len() != x.len() {
            return Err(Error::DimensionMismatch { expected: x.len(), actual: score.len() });
        }
        if score.iter().any(|s| !s.is_finite()) {
            return Err(Error::Integration { step, t });
        }
        match mode {
            ReverseMode::Stochastic => {
                gauss.fill(&mut z);
                let g = (beta * dt).sqrt();
                for ((xi, si), zi) in x.iter_mut().zip(&score).zip(&z) {
                    *xi += (0.5 * beta * *xi + beta * si) * dt + g * zi;
                }
            }
            ReverseMode::ProbabilityFlow => {
                for (xi, si) in x.iter_mut().zip(&score) {
                    *xi += 0.5 * beta * (*xi + si) * dt;
                }
            }
        }
    }
    Ok(StateVector::from_raw(x))
}

/// Sampled path of the forward process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    times: Vec<f64>,
    states: Vec<StateVector>,
}

impl Trajectory {
    pub fn new(times: Vec<f64>, states: Vec<StateVector>) -> Result<Self> {
        if times.len() != states.len() {
            return Err(Error::InvalidParameter(format!("{} times but {} states", times.len(), states.len())));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidParameter("trajectory times must increase strictly".into()));
        }
        if let Some(&t) = times.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::Domain { what: "trajectory time", value: t, domain: "[0, 1]" });
        }
        if let Some(first) = states.first() {
            for s in &states {
                s.check_dim(first.dim())?;
            }
        }
        Ok(Self { times, states })
    }

    /// Markov path through `times` starting from `x0` at `times[0]`.
    pub fn simulate(x0: &StateVector, times: &[f64], schedule: &LinearSchedule, noise: &NoiseStream) -> Result<Self> {
        let mut states = Vec::with_capacity(times.len());
        let mut gauss = noise.source();
        let mut current = x0.clone();
        for (i, &t) in times.iter().enumerate() {
            if i > 0 {
                let eps = gauss.vector(current.dim());
                current = transition_with_noise(&current, &eps, times[i - 1], t - times[i - 1], schedule)?;
            }
            states.push(current.clone());
        }
        Self::new(times.to_vec(), states)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn states(&self) -> &[StateVector] {
        &self.states
    }

    pub fn to_tensor(&self) -> crate::harness::tensor::Tensor {
        let d = self.states.first().map_or(0, |s| s.dim());
        let data = self.states.iter().flat_map(|s| s.iter().map(|&v| v as f32)).collect();
        crate::harness::tensor::Tensor::new(vec![self.states.len(), d], data)
            .expect("trajectory tensor shape is consistent")
    }
}
