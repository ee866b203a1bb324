use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("grid parameter {name} = {value} is below the minimum of 4")]
    GridTooSmall { name: &'static str, value: usize },
    #[error("unknown model kind `{0}`")]
    UnknownModel(String),
    #[error("complex structure parameter {0} is not in the upper half-plane")]
    LowerHalfPlane(String),
    #[error("invalid level k = {k}: {reason}")]
    InvalidLevel { k: i64, reason: &'static str },
    #[error("level mismatch: section at level {found}, basis at level {expected}")]
    LevelMismatch { expected: u32, found: u32 },
    #[error("model mismatch: {0}")]
    ModelMismatch(&'static str),
    #[error("matrix is singular or not positive definite: {0}")]
    Singular(&'static str),
    #[error("rank-deficient design matrix (condition number {0:.3e})")]
    RankDeficient(f64),
    #[error("not enough samples: need at least {needed}, got {got}")]
    NotEnoughSamples { needed: usize, got: usize },
    #[error("samples must have distinct, positive k values")]
    BadSamples,
    #[error("ill-conditioned symbol recovery (condition number {0:.3e})")]
    IllConditioned(f64),
    #[error("path leaves the upper half-plane at {0}")]
    PathLeavesDomain(String),
    #[error("transport step {step} too large: defect estimate {defect:.3e} exceeds 1e-2")]
    StepTooLarge { step: f64, defect: f64 },
    #[error("finite-difference step {0} must be positive")]
    BadStep(f64),
    #[error("one-form fails closedness: residual {0:.3e}")]
    NotClosed(f64),
    #[error("config error: {0}")]
    Config(String),
    #[error("unknown suite `{0}`")]
    UnknownSuite(String),
    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;
