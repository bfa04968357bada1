//! Cumulative diffusion purification with an embedding-stability stopping
//! rule, and a fixed-depth baseline.
//!
//! The loop injects noise one level (`1/T`) at a time, embeds the noised
//! state, and stops at the first level whose embedding has cosine similarity
//! at least `tau` with the previous level's embedding (and whose time exceeds
//! `min_t`). The state that passed the test is then denoised from its own
//! time back to zero.

use serde::{Deserialize, Serialize};

use crate::embed::{cosine, Encoder};
use crate::error::{Error, Result};
use crate::rng::{Gaussians, NoiseStream};
use crate::schedule::LinearSchedule;
use crate::sde::{forward_with_noise, reverse_integrate, transition_between, ReverseMode, ScoreFn, StateVector};

/// How the state at level `k/T` is produced from the input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InjectionMode {
    /// One Gaussian draw per trajectory, reused at every level through the
    /// closed-form marginal: `x_t = sqrt(alpha(t)) x + sqrt(1 - alpha(t)) eps`.
    #[default]
    Shared,
    /// Exact VP transition kernel from the previous level's state.
    Markov,
    /// Fresh draw from the closed-form marginal at every level. Diagnostic
    /// only: consecutive embeddings are nearly independent.
    Resample,
}

impl std::fmt::Display for InjectionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            InjectionMode::Shared => "shared",
            InjectionMode::Markov => "markov",
            InjectionMode::Resample => "resample",
        })
    }
}

/// Produces the noised states of one input at times `1/T, 2/T, ..., 1`.
pub struct Injector {
    mode: InjectionMode,
    x0: StateVector,
    current: StateVector,
    level: usize,
    levels: usize,
    gauss: Gaussians,
    shared_eps: Vec<f64>,
    schedule: LinearSchedule,
}

impl Injector {
    pub fn new(
        x0: &StateVector,
        mode: InjectionMode,
        levels: usize,
        schedule: LinearSchedule,
        noise: &NoiseStream,
    ) -> Result<Self> {
        if levels == 0 {
            return Err(Error::InvalidParameter("T must be at least 1".into()));
        }
        let mut gauss = noise.source();
        let shared_eps = match mode {
            InjectionMode::Shared => gauss.vector(x0.dim()),
            _ => Vec::new(),
        };
        Ok(Self { mode, x0: x0.clone(), current: x0.clone(), level: 0, levels, gauss, shared_eps, schedule })
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn time(&self) -> f64 {
        self.level as f64 / self.levels as f64
    }

    pub fn state(&self) -> &StateVector {
        &self.current
    }

    pub fn is_done(&self) -> bool {
        self.level >= self.levels
    }

    /// Moves to the next level and returns its time.
    pub fn advance(&mut self) -> Result<f64> {
        if self.is_done() {
            return Err(Error::InvalidParameter("injector already reached t = 1".into()));
        }
        let from = self.time();
        self.level += 1;
        let to = self.time();
        self.current = match self.mode {
            InjectionMode::Shared => forward_with_noise(&self.x0, &self.shared_eps, to, &self.schedule)?,
            InjectionMode::Markov => {
                let eps = self.gauss.vector(self.x0.dim());
                transition_between(&self.current, &eps, from, to, &self.schedule)?
            }
            InjectionMode::Resample => {
                let eps = self.gauss.vector(self.x0.dim());
                forward_with_noise(&self.x0, &eps, to, &self.schedule)?
            }
        };
        Ok(to)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PurifyConfig {
    pub tau: f64,
    /// Levels to reach `t = 1`; the step size is `1/T`.
    #[serde(rename = "T")]
    pub steps: usize,
    pub min_t: f64,
    pub injection_mode: InjectionMode,
    pub reverse_steps: usize,
    pub reverse_mode: ReverseMode,
}

impl Default for PurifyConfig {
    fn default() -> Self {
        Self {
            tau: 0.96,
            steps: 100,
            min_t: 0.0,
            injection_mode: InjectionMode::Shared,
            reverse_steps: 100,
            reverse_mode: ReverseMode::Stochastic,
        }
    }
}

impl PurifyConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.tau.is_finite() {
            return Err(Error::Config(format!("purify.tau must be finite, got {}", self.tau)));
        }
        if self.steps == 0 {
            return Err(Error::Config("purify.T must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.min_t) {
            return Err(Error::Config(format!("purify.min_t must lie in [0, 1), got {}", self.min_t)));
        }
        if self.reverse_steps == 0 {
            return Err(Error::Config("purify.reverse_steps must be at least 1".into()));
        }
        Ok(())
    }

    /// Levels at or below `min_t` never stop the loop.
    pub fn first_eligible_level(&self) -> usize {
        (self.min_t * self.steps as f64).floor() as usize + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PurificationResult {
    pub x_clean: StateVector,
    pub t_stop: f64,
    pub steps_used: usize,
    pub similarity_trace: Vec<f64>,
}

fn check_input(x: &StateVector) -> Result<()> {
    if x.in_box() {
        Ok(())
    } else {
        Err(Error::InvalidParameter("purification input must lie in [-1, 1]^d".into()))
    }
}

/// Runs only the forward half of the loop: returns the stabilized state, its
/// level, and the similarity trace.
pub fn find_stable_state(
    x_adv: &StateVector,
    encoder: &dyn Encoder,
    schedule: &LinearSchedule,
    cfg: &PurifyConfig,
    noise: &NoiseStream,
) -> Result<(StateVector, usize, Vec<f64>)> {
    cfg.validate().map_err(|e| Error::InvalidParameter(e.to_string()))?;
    check_input(x_adv)?;
    let mut e_prev = encoder.encode(x_adv)?;
    let mut inj = Injector::new(x_adv, cfg.injection_mode, cfg.steps, *schedule, &noise.substream(0, "purify/inject"))?;
    let eligible = cfg.first_eligible_level();
    let mut trace = Vec::with_capacity(cfg.steps);
    while !inj.is_done() {
        inj.advance()?;
        let k = inj.level();
        let e_curr = encoder.encode(inj.state())?;
        let sim = cosine(&e_curr, &e_prev)
            .map_err(|_| Error::UndefinedSimilarity(format!("embedding at step {k} (or {})", k - 1)))?;
        trace.push(sim);
        if sim >= cfg.tau && k >= eligible {
            break;
        }
        e_prev = e_curr;
    }
    Ok((inj.state().clone(), inj.level(), trace))
}

pub fn diffcap_purify(
    x_adv: &StateVector,
    encoder: &dyn Encoder,
    schedule: &LinearSchedule,
    score_fn: &dyn ScoreFn,
    cfg: &PurifyConfig,
    noise: &NoiseStream,
) -> Result<PurificationResult> {
    let (stable, level, trace) = find_stable_state(x_adv, encoder, schedule, cfg, noise)?;
    let t_stop = level as f64 / cfg.steps as f64;
    let x_clean = reverse_integrate(
        &stable,
        t_stop,
        schedule,
        score_fn,
        cfg.reverse_steps,
        cfg.reverse_mode,
        &noise.substream(0, "purify/reverse"),
    )?;
    Ok(PurificationResult { x_clean, t_stop, steps_used: level, similarity_trace: trace })
}

/// Diffuse to a fixed depth, then denoise. `steps_used` is 0 and the trace
/// is empty.
pub fn fixed_t_purify(
    x_adv: &StateVector,
    schedule: &LinearSchedule,
    score_fn: &dyn ScoreFn,
    t_fixed: f64,
    reverse_steps: usize,
    reverse_mode: ReverseMode,
    noise: &NoiseStream,
) -> Result<PurificationResult> {
    if !(t_fixed > 0.0 && t_fixed <= 1.0) {
        return Err(Error::Domain { what: "t_fixed", value: t_fixed, domain: "(0, 1]" });
    }
    check_input(x_adv)?;
    let eps = noise.substream(0, "purify/inject").source().vector(x_adv.dim());
    let noised = forward_with_noise(x_adv, &eps, t_fixed, schedule)?;
    let x_clean = reverse_integrate(
        &noised,
        t_fixed,
        schedule,
        score_fn,
        reverse_steps,
        reverse_mode,
        &noise.substream(0, "purify/reverse"),
    )?;
    Ok(PurificationResult { x_clean, t_stop: t_fixed, steps_used: 0, similarity_trace: Vec::new() })
}

/// A (possibly stochastic) input transformation applied before
/// classification.
pub trait Purifier: Sync {
    fn purify(&self, x: &StateVector, noise: &NoiseStream) -> Result<StateVector>;
}

pub struct IdentityPurifier;

impl Purifier for IdentityPurifier {
    fn purify(&self, x: &StateVector, _noise: &NoiseStream) -> Result<StateVector> {
        Ok(x.clone())
    }
}

pub struct DiffCapPurifier<'a> {
    pub encoder: &'a dyn Encoder,
    pub schedule: LinearSchedule,
    pub score: &'a dyn ScoreFn,
    pub cfg: PurifyConfig,
}

impl DiffCapPurifier<'_> {
    pub fn run(&self, x: &StateVector, noise: &NoiseStream) -> Result<PurificationResult> {
        diffcap_purify(x, self.encoder, &self.schedule, self.score, &self.cfg, noise)
    }
}

impl Purifier for DiffCapPurifier<'_> {
    fn purify(&self, x: &StateVector, noise: &NoiseStream) -> Result<StateVector> {
        // attack iterates can leave the box by rounding only; clamp to be safe
        let x = StateVector::clamped(x.to_vec())?;
        self.run(&x, noise).map(|r| r.x_clean)
    }
}

pub struct FixedTimePurifier<'a> {
    pub schedule: LinearSchedule,
    pub score: &'a dyn ScoreFn,
    pub t_fixed: f64,
    pub reverse_steps: usize,
    pub reverse_mode: ReverseMode,
}

impl FixedTimePurifier<'_> {
    pub fn run(&self, x: &StateVector, noise: &NoiseStream) -> Result<PurificationResult> {
        fixed_t_purify(x, &self.schedule, self.score, self.t_fixed, self.reverse_steps, self.reverse_mode, noise)
    }
}

impl Purifier for FixedTimePurifier<'_> {
    fn purify(&self, x: &StateVector, noise: &NoiseStream) -> Result<StateVector> {
        let x = StateVector::clamped(x.to_vec())?;
        self.run(&x, noise).map(|r| r.x_clean)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::LinearEncoder;
    use crate::sde::{GmmDistribution, GmmScore};

    fn setup() -> (LinearEncoder, LinearSchedule, GmmScore, StateVector) {
        let d = 8;
        let enc = LinearEncoder::random(d, 4, 5).unwrap();
        let s = LinearSchedule::default();
        let p0 = GmmDistribution::isotropic(vec![vec![0.5; d], vec![-0.5; d]], 0.01).unwrap();
        let x = StateVector::new((0..d).map(|i| 0.4 + 0.02 * i as f64).collect()).unwrap();
        (enc, s, GmmScore { p0, schedule: s }, x)
    }

    #[test]
    fn tau_minus_one_stops_after_one_step() {
        let (enc, s, score, x) = setup();
        for mode in [InjectionMode::Shared, InjectionMode::Markov, InjectionMode::Resample] {
            let cfg = PurifyConfig { tau: -1.0, injection_mode: mode, ..Default::default() };
            let r = diffcap_purify(&x, &enc, &s, &score, &cfg, &NoiseStream::new(1, 0, "p")).unwrap();
            assert_eq!(r.steps_used, 1);
            assert_eq!(r.t_stop, 0.01);
            assert_eq!(r.similarity_trace.len(), 1);
        }
    }

    #[test]
    fn tau_above_one_runs_to_the_end() {
        let (enc, s, score, x) = setup();
        let cfg = PurifyConfig { tau: 1.5, ..Default::default() };
        let r = diffcap_purify(&x, &enc, &s, &score, &cfg, &NoiseStream::new(1, 0, "p")).unwrap();
        assert_eq!(r.steps_used, 100);
        assert_eq!(r.t_stop, 1.0);
        assert_eq!(r.similarity_trace.len(), 100);
        assert!(r.similarity_trace.iter().all(|c| (-1.0..=1.0).contains(c)));
        assert_eq!(r.x_clean.dim(), x.dim());
        assert!(r.x_clean.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn min_t_is_strict() {
        let (enc, s, score, x) = setup();
        let cfg = PurifyConfig { tau: -1.0, min_t: 0.04, ..Default::default() };
        let r = diffcap_purify(&x, &enc, &s, &score, &cfg, &NoiseStream::new(1, 0, "p")).unwrap();
        assert_eq!(r.steps_used, 5);
        assert!(r.t_stop > cfg.min_t);
    }

    #[test]
    fn shared_similarity_rises_toward_one() {
        let (enc, s, _, x) = setup();
        let cfg = PurifyConfig { tau: 2.0, ..Default::default() };
        let (_, _, trace) = find_stable_state(&x, &enc, &s, &cfg, &NoiseStream::new(3, 0, "p")).unwrap();
        assert!(trace[90] > trace[0]);
        assert!(trace[99] > 0.9999);
    }

    #[test]
    fn probability_flow_is_reproducible() {
        let (enc, s, score, x) = setup();
        let cfg = PurifyConfig { tau: 0.999, reverse_mode: ReverseMode::ProbabilityFlow, ..Default::default() };
        let a = diffcap_purify(&x, &enc, &s, &score, &cfg, &NoiseStream::new(4, 2, "p")).unwrap();
        let b = diffcap_purify(&x, &enc, &s, &score, &cfg, &NoiseStream::new(4, 2, "p")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_out_of_box_input() {
        let (enc, s, score, _) = setup();
        let x = StateVector::new(vec![1.5; 8]).unwrap();
        assert!(diffcap_purify(&x, &enc, &s, &score, &PurifyConfig::default(), &NoiseStream::new(1, 0, "p")).is_err());
    }

    #[test]
    fn zero_embedding_names_the_step() {
        let enc = LinearEncoder::from_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let s = LinearSchedule::default();
        let x = StateVector::zeros(2);
        let err = find_stable_state(&x, &enc, &s, &PurifyConfig::default(), &NoiseStream::new(1, 0, "p")).unwrap_err();
        assert!(err.to_string().contains("step 1"), "{err}");
    }

    #[test]
    fn fixed_time_degenerate_depth_is_near_identity() {
        let (_, s, score, x) = setup();
        let r = fixed_t_purify(&x, &s, &score, 1e-7, 10, ReverseMode::ProbabilityFlow, &NoiseStream::new(1, 0, "f"))
            .unwrap();
        assert_eq!(r.t_stop, 1e-7);
        assert!(r.x_clean.linf_distance(&x) < 1e-2);
        assert!(fixed_t_purify(&x, &s, &score, 0.0, 10, ReverseMode::Stochastic, &NoiseStream::new(1, 0, "f")).is_err());
    }
}
