use thiserror::Error;

/// Errors raised by samplers, models, and experiment plumbing.
#[derive(Debug, Error)]
pub enum Error {
    /// Cholesky factorization hit a non-positive pivot.
    #[error("matrix is not positive definite: leading minor of order {minor} is not positive")]
    NotPositiveDefinite { minor: usize },

    /// Jitter escalation exhausted without producing a factorizable matrix.
    #[error("matrix is numerically singular: factorization failed even with jitter {jitter:e}")]
    Singular { jitter: f64 },

    /// Same as [`Error::Singular`] but for one block of a block-diagonal system.
    #[error("diagonal block {block} is numerically singular (final jitter {jitter:e})")]
    SingularBlock { block: usize, jitter: f64 },

    #[error("non-finite {what} at particle {index}")]
    NonFiniteParticle { what: &'static str, index: usize },

    #[error("non-finite state at step {step}")]
    NonFiniteState { step: usize },

    #[error("non-finite {0}")]
    NonFinite(&'static str),

    #[error("median pairwise distance is zero; all particles coincide")]
    DegenerateBandwidth,

    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },

    #[error(
        "dense Newton system with {unknowns} unknowns exceeds the limit of {limit}; \
         use the operator mode (ncg strategy) instead"
    )]
    MemoryGuard { unknowns: usize, limit: usize },

    #[error("{0} is not available for this model")]
    Unsupported(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}
