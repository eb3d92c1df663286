use thiserror::Error;

/// Errors surfaced by set operations, penalty construction, solvers, and IO.
#[derive(Debug, Error)]
pub enum GdError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("unsupported set variant for {op}: {detail}")]
    UnsupportedVariant { op: &'static str, detail: String },

    #[error("invalid set: {0}")]
    InvalidSet(String),

    #[error("invalid penalty: {0}")]
    InvalidPenalty(String),

    #[error("matrix is rank deficient on the model subspace: {0}")]
    RankDeficient(String),

    #[error("point outside the loss domain: {0}")]
    Domain(String),

    #[error("solver did not converge after {iterations} iterations (residual {residual:.3e})")]
    NonConverged { iterations: usize, residual: f64 },

    #[error("dataset generator failed: {0}")]
    Generator(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path}: {detail}")]
    Parse { path: String, detail: String },
}

pub type Result<T> = std::result::Result<T, GdError>;

impl GdError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        GdError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<String>, detail: impl Into<String>) -> Self {
        GdError::Parse {
            path: path.into(),
            detail: detail.into(),
        }
    }
}
