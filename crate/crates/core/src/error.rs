use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the transport solvers and the experiment front end.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("shape mismatch: expected {expected} values, got {found}")]
    ShapeMismatch { expected: usize, found: usize },

    #[error("invalid medium: {0}")]
    InvalidMedium(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("CFL violation: dt = {dt} exceeds the stable step {limit}")]
    Cfl { dt: f64, limit: f64 },

    #[error("tau / dt = {ratio} is not an integer step count")]
    NonIntegerSteps { ratio: f64 },

    #[error("non-finite values detected at step {step} (t = {time})")]
    NonFinite { step: usize, time: f64 },

    #[error("{solver} did not converge after {iterations} iterations (residual {residual:e})")]
    NotConverged {
        solver: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("{solver} stagnated at iteration {iterations} (residual {residual:e})")]
    Stagnation {
        solver: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("neumann iteration diverged at iterate {iteration}: increment ratio {ratio}")]
    Diverged { iteration: usize, ratio: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
