use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{what} = {value} is outside its domain {domain}")]
    Domain { what: &'static str, value: f64, domain: &'static str },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("cosine similarity undefined: {0} has zero norm")]
    UndefinedSimilarity(String),

    #[error("reverse integration failed at step {step} (t = {t}): score is not finite")]
    Integration { step: usize, t: f64 },

    #[error("degenerate margin: p1 = {p1} must exceed p2 = {p2}")]
    DegenerateMargin { p1: f64, p2: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Tensor(#[from] crate::harness::tensor::TensorError),

    #[error(transparent)]
    Report(#[from] crate::harness::report::ReportError),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True for errors that stem from user-supplied configuration. Errors
    /// raised inside a pipeline stage are stage failures, not config errors.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::InvalidParameter(_) | Error::Domain { .. })
    }
}

pub(crate) fn check_unit_interval(what: &'static str, t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::Domain { what, value: t, domain: "[0, 1]" })
    }
}
