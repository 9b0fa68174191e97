use std::path::PathBuf;

use thiserror::Error;

/// Errors produced across the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite potential value at row {row}")]
    NumericOverflow { row: usize },

    #[error("non-finite gradient at row {row}")]
    NonFiniteGradient { row: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("activation `{0}` has no usable second derivative")]
    UnsupportedActivation(&'static str),

    #[error("sampler diverged at step {step}")]
    Divergence { step: usize },

    #[error("training diverged at iteration {iteration}: {reason}")]
    TrainingDiverged { iteration: usize, reason: String },

    #[error("spectral bound violated: estimated norm {norm:.4} >= 1 and dimension {dim} too large for dense fallback")]
    SpectralBound { norm: f64, dim: usize },

    #[error("kernel bandwidth is zero (all points identical)")]
    ZeroBandwidth,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    Shape {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
