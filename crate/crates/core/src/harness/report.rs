//! Experiment report: types, JSON persistence and schema validation.
//!
//! The schema lives in `docs/report.schema.json` and is compiled into the
//! library. Reports carry `schema_version`; reading a report written under a
//! different version fails before validation.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::attack::AdaptiveMode;
use crate::calibrate::CalibrationStep;
use crate::certify::Certificate;

pub const SCHEMA_VERSION: &str = "1.0.0";
pub const SCHEMA: &str = include_str!("../../../../docs/report.schema.json");

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("report schema version mismatch: expected {expected}, found {found}")]
    Version { expected: String, found: String },
    #[error("report fails schema validation at {path}: {message}")]
    Schema { path: String, message: String },
    #[error("report JSON error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("report I/O error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolInfo {
    pub name: String,
    pub version: String,
}

impl Default for ToolInfo {
    fn default() -> Self {
        Self { name: "diffcap".into(), version: env!("CARGO_PKG_VERSION").into() }
    }
}

/// Five-number summary plus mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionSummary {
    pub n: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub mean: f64,
    pub std: f64,
}

impl DistributionSummary {
    /// Quartiles interpolate linearly between order statistics.
    pub fn from_values(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let h = p * (v.len() - 1) as f64;
            let (lo, hi) = (h.floor() as usize, h.ceil() as usize);
            v[lo] + (h - lo as f64) * (v[hi] - v[lo])
        };
        let n = v.len() as f64;
        // rounding can push the sum of a constant sample past its maximum
        let mean = (v.iter().sum::<f64>() / n).clamp(v[0], v[v.len() - 1]);
        let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        Some(Self { n: v.len(), min: v[0], q1: q(0.25), median: q(0.5), q3: q(0.75), max: v[v.len() - 1], mean, std })
    }

    pub fn is_ordered(&self) -> bool {
        self.min <= self.q1
            && self.q1 <= self.median
            && self.median <= self.q3
            && self.q3 <= self.max
            && self.min <= self.mean
            && self.mean <= self.max
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub n_test: usize,
    pub n_classes: usize,
    pub dim: usize,
    pub n_calibration_pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSummary {
    pub tau: f64,
    pub t_star: f64,
    pub converged: bool,
    pub n_pairs: usize,
    pub test: String,
    pub alpha: f64,
    pub per_step: Vec<CalibrationStep>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefenseResult {
    pub name: String,
    pub purified_accuracy: f64,
    pub t_stop: DistributionSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PresetResult {
    pub epsilon: f64,
    pub attacked_accuracy: f64,
    pub mean_linf: f64,
    pub mean_l2: f64,
    pub defenses: Vec<DefenseResult>,
}

impl PresetResult {
    pub fn defense(&self, name: &str) -> Option<&DefenseResult> {
        self.defenses.iter().find(|d| d.name == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveResult {
    pub mode: AdaptiveMode,
    pub eot_samples: usize,
    pub epsilon: f64,
    pub n_points: usize,
    /// Plain PGD, no defense.
    pub undefended_accuracy: f64,
    /// Plain PGD examples, then DiffCAP.
    pub transfer_purified_accuracy: f64,
    /// Adaptive examples, then DiffCAP.
    pub adaptive_purified_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateRecord {
    pub index: usize,
    pub label: usize,
    pub k1: usize,
    pub eps_l2: f64,
    pub p1_lower: f64,
    pub p2_upper: f64,
    pub n_mc: usize,
    pub confidence: f64,
    pub t_grid: Vec<f64>,
    /// Grid times at which the smoothed probability gap held.
    pub holds_on: Vec<f64>,
    pub certificate: Option<Certificate>,
    /// Why no certificate could be formed, if none was.
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema_version: String,
    pub tool: ToolInfo,
    pub config: Value,
    pub dataset: DatasetSummary,
    /// Percentages in `[0, 100]` throughout.
    pub clean_accuracy: f64,
    pub calibration: Option<CalibrationSummary>,
    pub tau_used: f64,
    pub fixed_t: f64,
    pub presets: Vec<PresetResult>,
    pub adaptive: Option<AdaptiveResult>,
    pub certificates: Vec<CertificateRecord>,
    /// Conditions that make parts of the report diagnostic only.
    pub warnings: Vec<String>,
    /// Stage wall-clock times are kept out of the report so that reruns are
    /// byte-identical; they are written to this sidecar file.
    pub timings_file: String,
}

impl ExperimentReport {
    pub fn preset(&self, epsilon: f64) -> Option<&PresetResult> {
        self.presets.iter().find(|p| p.epsilon == epsilon)
    }

    pub fn to_json(&self) -> Result<String, ReportError> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn write(&self, path: &Path) -> Result<(), ReportError> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    /// Parses, version-checks and validates a report.
    pub fn from_json(text: &str) -> Result<Self, ReportError> {
        let value: Value = serde_json::from_str(text)?;
        let found = value.get("schema_version").and_then(Value::as_str).unwrap_or("<missing>");
        if found != SCHEMA_VERSION {
            return Err(ReportError::Version { expected: SCHEMA_VERSION.into(), found: found.into() });
        }
        validate(&value)?;
        Ok(serde_json::from_value(value)?)
    }

    pub fn read(path: &Path) -> Result<Self, ReportError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Checks a JSON document against the bundled schema, reporting the first
/// violation with its JSON pointer.
pub fn validate(value: &Value) -> Result<(), ReportError> {
    let schema: Value = serde_json::from_str(SCHEMA).expect("bundled schema is valid JSON");
    let validator = jsonschema::validator_for(&schema).expect("bundled schema compiles");
    if let Some(err) = validator.iter_errors(value).next() {
        let path = err.instance_path.to_string();
        return Err(ReportError::Schema {
            path: if path.is_empty() { "/".into() } else { path },
            message: err.to_string(),
        });
    }
    Ok(())
}
