use std::path::PathBuf;

use gradkit::GradError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PadmError {
    #[error("invalid phantom: {0}")]
    InvalidPhantom(String),
    #[error("invalid interval for `{field}`: lo {lo} > hi {hi}")]
    InvalidInterval { field: String, lo: f64, hi: f64 },
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("angle index {index} out of range for {count} angles")]
    AngleOutOfRange { index: usize, count: usize },
    #[error("MLEM produced a non-finite value at iteration {0}")]
    Divergence(usize),
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("no attenuation map for {0}")]
    MissingMu(String),
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error("malformed file {path}: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Grad(#[from] GradError),
}

pub type Result<T> = std::result::Result<T, PadmError>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> PadmError {
    let path = path.into();
    move |source| PadmError::Io { path, source }
}
