//! ℓ∞ PGD against the cosine classifier, and BPDA / EOT adaptive variants
//! that attack a purify-then-classify pipeline.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embed::{CosineClassifier, Encoder};
use crate::error::{Error, Result};
use crate::purify::Purifier;
use crate::rng::NoiseStream;
use crate::sde::StateVector;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub step_size: f64,
    pub n_steps: usize,
    pub temperature: f64,
    pub random_start: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self { epsilon: 0.3, step_size: 0.075, n_steps: 20, temperature: 0.1, random_start: false }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::InvalidParameter(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            return Err(Error::InvalidParameter(format!("step_size must be > 0, got {}", self.step_size)));
        }
        if self.n_steps == 0 {
            return Err(Error::InvalidParameter("n_steps must be at least 1".into()));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::InvalidParameter(format!("temperature must be > 0, got {}", self.temperature)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdaptiveMode {
    #[default]
    Bpda,
    #[serde(rename = "bpda+eot")]
    BpdaEot,
}

impl std::str::FromStr for AdaptiveMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bpda" => Ok(Self::Bpda),
            "bpda+eot" => Ok(Self::BpdaEot),
            other => Err(Error::InvalidParameter(format!("unknown adaptive mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdversarialExample {
    pub x_clean: StateVector,
    pub x_adv: StateVector,
    pub success: bool,
    pub l2_norm: f64,
    pub linf_norm: f64,
}

impl AdversarialExample {
    fn new(x_clean: &StateVector, x_adv: StateVector, success: bool) -> Self {
        Self {
            l2_norm: x_adv.l2_distance(x_clean),
            linf_norm: x_adv.linf_distance(x_clean),
            x_clean: x_clean.clone(),
            x_adv,
            success,
        }
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn project(x0: &[f64], x: &mut [f64], eps: f64) {
    for (xi, &ci) in x.iter_mut().zip(x0) {
        *xi = xi.clamp(ci - eps, ci + eps).clamp(-1.0, 1.0);
    }
}

fn check_inputs<E: Encoder>(
    clf: &CosineClassifier<E>,
    x: &StateVector,
    label: usize,
    cfg: &AttackConfig,
) -> Result<()> {
    cfg.validate()?;
    if x.dim() != clf.input_dim() {
        return Err(Error::DimensionMismatch { expected: clf.input_dim(), actual: x.dim() });
    }
    if !x.in_box() {
        return Err(Error::InvalidParameter("attack input must lie in [-1, 1]^d".into()));
    }
    if label >= clf.n_classes() {
        return Err(Error::InvalidParameter(format!("label {label} out of range for {} classes", clf.n_classes())));
    }
    Ok(())
}

/// Shared sign-gradient ascent loop; `grad` maps (iterate, step index) to
/// an ascent direction.
fn ascend(
    x: &StateVector,
    cfg: &AttackConfig,
    noise: &NoiseStream,
    mut grad: impl FnMut(&StateVector, usize) -> Result<Vec<f64>>,
) -> Result<StateVector> {
    let mut cur = x.to_vec();
    if cfg.random_start && cfg.epsilon > 0.0 {
        let mut g = noise.substream(0, "attack/start").source();
        for v in cur.iter_mut() {
            *v += g.uniform(-cfg.epsilon, cfg.epsilon);
        }
        project(x, &mut cur, cfg.epsilon);
    }
    if cfg.epsilon == 0.0 {
        return Ok(x.clone());
    }
    for step in 0..cfg.n_steps {
        let state = StateVector::new(cur.clone())?;
        let g = grad(&state, step)?;
        for (v, gi) in cur.iter_mut().zip(&g) {
            *v += cfg.step_size * sign(*gi);
        }
        project(x, &mut cur, cfg.epsilon);
    }
    StateVector::new(cur)
}

/// Projected sign-gradient ascent on the softmax cross-entropy of the cosine
/// logits. One step without random start is FGSM.
pub fn pgd<E: Encoder>(
    clf: &CosineClassifier<E>,
    x: &StateVector,
    label: usize,
    cfg: &AttackConfig,
    noise: &NoiseStream,
) -> Result<AdversarialExample> {
    check_inputs(clf, x, label, cfg)?;
    let x_adv = ascend(x, cfg, noise, |s, _| clf.loss_gradient(s, label, cfg.temperature).map(|g| g.into_inner()))?;
    let success = clf.classify(&x_adv)? != label;
    Ok(AdversarialExample::new(x, x_adv, success))
}

/// PGD through a purifier. The backward pass treats the purifier as the
/// identity; in EOT mode the gradient is averaged over `eot_samples`
/// independent purifications. Success means the purified adversarial input
/// is misclassified.
#[allow(clippy::too_many_arguments)]
pub fn adaptive_attack<E: Encoder>(
    clf: &CosineClassifier<E>,
    purifier: &dyn Purifier,
    x: &StateVector,
    label: usize,
    cfg: &AttackConfig,
    mode: AdaptiveMode,
    eot_samples: usize,
    noise: &NoiseStream,
) -> Result<AdversarialExample> {
    check_inputs(clf, x, label, cfg)?;
    if eot_samples == 0 {
        return Err(Error::InvalidParameter("eot_samples must be at least 1".into()));
    }
    let samples = match mode {
        AdaptiveMode::Bpda => 1,
        AdaptiveMode::BpdaEot => eot_samples,
    };
    let x_adv = ascend(x, cfg, noise, |s, step| {
        let mut acc = vec![0.0; s.dim()];
        for e in 0..samples {
            let sub = noise.substream((step * samples + e) as u64, "attack/eot");
            let p = purifier.purify(s, &sub)?;
            let g = clf.loss_gradient(&p, label, cfg.temperature)?;
            for (a, gi) in acc.iter_mut().zip(g.iter()) {
                *a += gi / samples as f64;
            }
        }
        Ok(acc)
    })?;
    let purified = purifier.purify(&x_adv, &noise.substream(0, "attack/final"))?;
    let success = clf.classify(&purified)? != label;
    Ok(AdversarialExample::new(x, x_adv, success))
}

/// PGD over a batch; example `i` uses stream `(seed, i, "attack")`.
pub fn pgd_batch<E: Encoder>(
    clf: &CosineClassifier<E>,
    xs: &[StateVector],
    labels: &[usize],
    cfg: &AttackConfig,
    seed: u64,
) -> Result<Vec<AdversarialExample>> {
    if xs.len() != labels.len() {
        return Err(Error::DimensionMismatch { expected: xs.len(), actual: labels.len() });
    }
    xs.par_iter()
        .zip(labels.par_iter())
        .enumerate()
        .map(|(i, (x, &y))| pgd(clf, x, y, cfg, &NoiseStream::new(seed, i as u64, "attack")))
        .collect()
}

#[allow(clippy::too_many_arguments)]
pub fn adaptive_batch<E: Encoder>(
    clf: &CosineClassifier<E>,
    purifier: &dyn Purifier,
    xs: &[StateVector],
    labels: &[usize],
    cfg: &AttackConfig,
    mode: AdaptiveMode,
    eot_samples: usize,
    seed: u64,
) -> Result<Vec<AdversarialExample>> {
    if xs.len() != labels.len() {
        return Err(Error::DimensionMismatch { expected: xs.len(), actual: labels.len() });
    }
    xs.par_iter()
        .zip(labels.par_iter())
        .enumerate()
        .map(|(i, (x, &y))| {
            adaptive_attack(clf, purifier, x, y, cfg, mode, eot_samples, &NoiseStream::new(seed, i as u64, "attack"))
        })
        .collect()
}
