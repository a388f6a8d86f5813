//! Crate-wide error type.

use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A precondition on user-supplied data failed.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Vector/matrix dimensions do not line up.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// Training labels contain a single class; the logistic fit is degenerate.
    #[error("degenerate labels: all {0} training labels belong to one class")]
    DegenerateLabels(usize),

    /// The optimizer produced a non-finite loss.
    #[error("non-finite loss at iteration {iteration}: {detail}")]
    NonFiniteLoss { iteration: usize, detail: String },

    /// A symmetric factorization failed; the matrix is not positive definite.
    #[error("singular metric: {0}")]
    SingularMetric(String),

    /// The candidate's Schur complement fell below tolerance; it is
    /// (numerically) linearly dependent on the current selection.
    #[error("degenerate candidate {index}: schur complement {schur:.3e} <= tolerance {tol:.3e}")]
    DegenerateCandidate { index: usize, schur: f64, tol: f64 },

    /// Every remaining candidate is degenerate or the pool is empty.
    #[error("candidate pool exhausted after {selected} selections")]
    PoolExhausted { selected: usize },

    /// A brute-force enumeration would exceed the combinatorial guard.
    #[error(
        "combinatorial guard exceeded: {subsets} subsets > limit {limit}; shrink the instance"
    )]
    CombinatorialGuard { subsets: u128, limit: u128 },

    /// The gradient-norm gate for an optimality-dependent check failed.
    #[error("gradient gate failed: |grad|_inf = {norm:.3e} > {gate:.3e}; fit to optimality first")]
    GradientGate { norm: f64, gate: f64 },

    /// A workflow could not find misclassified validation points to target.
    #[error("no misclassified validation points; nothing to attribute")]
    NoMisclassified,

    /// Text-format parse failure with file coordinates.
    #[error("parse error in {path} (line {line}): {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn dims(msg: impl Into<String>) -> Self {
        Error::DimensionMismatch(msg.into())
    }

    pub(crate) fn parse(path: &str, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.to_string(),
            line,
            message: msg.into(),
        }
    }

    pub(crate) fn io(path: &str, source: std::io::Error) -> Self {
        Error::Io {
            path: path.to_string(),
            source,
        }
    }
}
