//! Experiment configuration.
//!
//! The file is TOML. Every key may be written either inside its table or as
//! a dotted key at top level, so these are equivalent:
//!
//! ```toml
//! [purify]
//! tau = 0.96
//! ```
//!
//! ```toml
//! purify.tau = 0.96
//! ```
//!
//! Unknown keys are rejected. The only environment variable consulted is
//! `DIFFCAP_OUTPUT_DIR`, which replaces `output_dir`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::{AdaptiveMode, AttackConfig};
use crate::calibrate::{CalibrateConfig, SameDistributionTest};
use crate::certify::DEFAULT_CONFIDENCE;
use crate::embed::{AnyEncoder, LinearEncoder, MlpEncoder};
use crate::error::{Error, Result};
use crate::purify::{InjectionMode, PurifyConfig};
use crate::schedule::LinearSchedule;
use crate::sde::{GmmDistribution, ReverseMode};

pub const OUTPUT_DIR_ENV: &str = "DIFFCAP_OUTPUT_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    #[default]
    Linear,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSpec {
    pub kind: EncoderKind,
    pub seed: u64,
    /// Embedding dimension.
    pub m: usize,
    /// Hidden width, MLP only.
    pub hidden: usize,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self { kind: EncoderKind::Linear, seed: 7, m: 4, hidden: 32 }
    }
}

impl EncoderSpec {
    pub fn build(&self, input_dim: usize) -> Result<AnyEncoder> {
        Ok(match self.kind {
            EncoderKind::Linear => AnyEncoder::Linear(LinearEncoder::random(input_dim, self.m, self.seed)?),
            EncoderKind::Mlp => AnyEncoder::Mlp(MlpEncoder::random(input_dim, self.hidden, self.m, self.seed)?),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSpec {
    /// Test points per class.
    pub n_per_class: usize,
    /// Clean/adversarial pairs per class for calibration.
    pub calibration_per_class: usize,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self { n_per_class: 100, calibration_per_class: 50 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSpec {
    /// Budgets evaluated, in data units.
    pub epsilons: Vec<f64>,
    /// Budget used for calibration pairs, certification and the adaptive
    /// attack; must be one of `epsilons`.
    pub default_epsilon: f64,
    /// Step size as a fraction of the budget.
    pub step_fraction: f64,
    pub n_steps: usize,
    pub temperature: f64,
    pub random_start: bool,
    /// Run BPDA against DiffCAP at the default budget.
    pub adaptive: bool,
    pub adaptive_mode: AdaptiveMode,
    pub eot_samples: usize,
    /// Test points attacked adaptively (the first `n` of the test set).
    pub adaptive_points: usize,
}

impl Default for AttackSpec {
    fn default() -> Self {
        Self {
            epsilons: vec![0.0, 0.15, 0.3],
            default_epsilon: 0.3,
            step_fraction: 0.25,
            n_steps: 20,
            temperature: 0.1,
            random_start: false,
            adaptive: true,
            adaptive_mode: AdaptiveMode::BpdaEot,
            eot_samples: 3,
            adaptive_points: 100,
        }
    }
}

impl AttackSpec {
    pub fn config(&self, epsilon: f64) -> AttackConfig {
        AttackConfig {
            epsilon,
            // a zero budget still needs a valid step
            step_size: if epsilon > 0.0 { self.step_fraction * epsilon } else { 1.0 },
            n_steps: self.n_steps,
            temperature: self.temperature,
            random_start: self.random_start,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PurifySpec {
    pub tau: f64,
    #[serde(rename = "T")]
    pub steps: usize,
    pub min_t: f64,
    pub injection_mode: InjectionMode,
    pub reverse_steps: usize,
    pub reverse_mode: ReverseMode,
    /// Use the calibrated threshold instead of `tau` when calibration runs.
    pub use_calibrated_tau: bool,
    /// Depth of the fixed-time baseline.
    pub fixed_t: f64,
}

impl Default for PurifySpec {
    fn default() -> Self {
        let b = PurifyConfig::default();
        Self {
            tau: b.tau,
            steps: b.steps,
            min_t: b.min_t,
            injection_mode: b.injection_mode,
            reverse_steps: b.reverse_steps,
            reverse_mode: b.reverse_mode,
            use_calibrated_tau: true,
            fixed_t: 0.075,
        }
    }
}

impl PurifySpec {
    pub fn base(&self) -> PurifyConfig {
        PurifyConfig {
            tau: self.tau,
            steps: self.steps,
            min_t: self.min_t,
            injection_mode: self.injection_mode,
            reverse_steps: self.reverse_steps,
            reverse_mode: self.reverse_mode,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrateSpec {
    pub enabled: bool,
    #[serde(rename = "T")]
    pub steps: usize,
    pub alpha: f64,
    pub test: SameDistributionTest,
    pub shuffles: usize,
}

impl Default for CalibrateSpec {
    fn default() -> Self {
        let b = CalibrateConfig::default();
        Self { enabled: true, steps: b.steps, alpha: b.alpha, test: b.test, shuffles: b.shuffles }
    }
}

impl CalibrateSpec {
    /// Calibration injects noise the same way purification does.
    pub fn base(&self, injection_mode: InjectionMode) -> CalibrateConfig {
        CalibrateConfig {
            steps: self.steps,
            alpha: self.alpha,
            test: self.test,
            shuffles: self.shuffles,
            injection_mode,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CertifySpec {
    /// Test points certified (the first `n` of the test set).
    pub n_points: usize,
    pub t_grid: Vec<f64>,
    pub n_mc: usize,
    pub confidence: f64,
}

impl Default for CertifySpec {
    fn default() -> Self {
        Self { n_points: 5, t_grid: vec![0.01, 0.02, 0.05, 0.1], n_mc: 1000, confidence: DEFAULT_CONFIDENCE }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub schedule: LinearSchedule,
    pub gmm: GmmDistribution,
    pub encoder: EncoderSpec,
    pub data: DataSpec,
    pub attack: AttackSpec,
    pub purify: PurifySpec,
    pub calibrate: CalibrateSpec,
    pub certify: CertifySpec,
}

/// Two isotropic classes at `±0.5·1` with variance 0.01 in 16 dimensions.
pub fn default_gmm() -> GmmDistribution {
    let d = 16;
    GmmDistribution::isotropic(vec![vec![0.5; d], vec![-0.5; d]], 0.01).expect("default mixture is valid")
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("out"),
            schedule: LinearSchedule::default(),
            gmm: default_gmm(),
            encoder: EncoderSpec::default(),
            data: DataSpec::default(),
            attack: AttackSpec::default(),
            purify: PurifySpec::default(),
            calibrate: CalibrateSpec::default(),
            certify: CertifySpec::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config file, then applies the output directory
    /// override from the environment.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        cfg.apply_env();
        Ok(cfg)
    }

    pub fn apply_env(&mut self) {
        if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV).filter(|d| !d.is_empty()) {
            self.output_dir = PathBuf::from(dir);
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |m: String| Err(Error::Config(m));
        if self.gmm.n_components() < 2 {
            return cfg_err("gmm must have at least two components (one per class)".into());
        }
        if self.encoder.m < 2 {
            return cfg_err(format!("encoder.m must be at least 2, got {}", self.encoder.m));
        }
        if self.encoder.kind == EncoderKind::Mlp && self.encoder.hidden == 0 {
            return cfg_err("encoder.hidden must be at least 1".into());
        }
        if self.data.n_per_class == 0 {
            return cfg_err("data.n_per_class must be at least 1".into());
        }
        if self.calibrate.enabled && self.data.calibration_per_class == 0 {
            return cfg_err("data.calibration_per_class must be at least 1 when calibration is enabled".into());
        }
        let a = &self.attack;
        if a.epsilons.is_empty() {
            return cfg_err("attack.epsilons must not be empty".into());
        }
        if !a.epsilons.contains(&a.default_epsilon) {
            return cfg_err(format!("attack.default_epsilon {} is not one of attack.epsilons", a.default_epsilon));
        }
        if !(a.step_fraction > 0.0) {
            return cfg_err(format!("attack.step_fraction must be > 0, got {}", a.step_fraction));
        }
        if a.eot_samples == 0 {
            return cfg_err("attack.eot_samples must be at least 1".into());
        }
        for &eps in &a.epsilons {
            a.config(eps).validate().map_err(|e| Error::Config(format!("attack: {e}")))?;
        }
        self.purify.base().validate()?;
        if !(self.purify.fixed_t > 0.0 && self.purify.fixed_t <= 1.0) {
            return cfg_err(format!("purify.fixed_t must lie in (0, 1], got {}", self.purify.fixed_t));
        }
        if self.calibrate.enabled {
            self.calibrate.base(self.purify.injection_mode).validate()?;
        }
        let c = &self.certify;
        if c.n_points > 0 {
            if c.n_mc < 100 {
                return cfg_err(format!("certify.n_mc must be at least 100, got {}", c.n_mc));
            }
            if c.t_grid.is_empty() || c.t_grid.iter().any(|&t| !(t > 0.0 && t <= 1.0)) {
                return cfg_err("certify.t_grid must be a non-empty list of times in (0, 1]".into());
            }
            if !(c.confidence > 0.0 && c.confidence < 1.0) {
                return cfg_err(format!("certify.confidence must lie in (0, 1), got {}", c.confidence));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_default() {
        assert_eq!(ExperimentConfig::from_toml("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn dotted_keys_and_tables_agree() {
        let a = ExperimentConfig::from_toml(
            "purify.tau = 0.9\npurify.T = 50\nschedule.beta_min = 0.2\nschedule.beta_max = 10.0\n",
        )
        .unwrap();
        let b =
            ExperimentConfig::from_toml("[purify]\ntau = 0.9\nT = 50\n[schedule]\nbeta_min = 0.2\nbeta_max = 10.0\n")
                .unwrap();
        assert_eq!(a, b);
        assert_eq!(a.purify.tau, 0.9);
        assert_eq!(a.purify.steps, 50);
        assert_eq!(a.schedule.beta_max(), 10.0);
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn rejects_bad_values() {
        for bad in [
            "unknown = 1",
            "purify.bogus = 1",
            "schedule.beta_min = 5.0\nschedule.beta_max = 1.0",
            "purify.T = 0",
            "purify.min_t = 1.0",
            "attack.epsilons = [0.1]\nattack.default_epsilon = 0.2",
            "calibrate.alpha = 1.5",
            "data.n_per_class = 0",
            "encoder.kind = \"cnn\"",
            "gmm.weights = [1.0]\ngmm.means = [[0.0]]\ngmm.vars = [[1.0]]",
            "certify.n_mc = 10",
        ] {
            let err = ExperimentConfig::from_toml(bad).unwrap_err();
            assert!(err.is_config(), "{bad}: {err}");
        }
    }

    #[test]
    fn explicit_mixture() {
        let cfg = ExperimentConfig::from_toml(
            "gmm.weights = [0.25, 0.75]\ngmm.means = [[0.1, 0.2], [-0.3, 0.4]]\ngmm.vars = [[0.01, 0.02], [0.03, 0.04]]\n",
        )
        .unwrap();
        assert_eq!(cfg.gmm.dim(), 2);
        assert_eq!(cfg.gmm.weights(), &[0.25, 0.75]);
    }
}
