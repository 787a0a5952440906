use thiserror::Error;

/// Errors raised across the library.
///
/// Variants fall into two families that the CLI maps onto distinct exit
/// codes: data/validation problems and numerical failures (see
/// [`Error::is_numerical`]).
#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix `{what}` is not invertible")]
    Singular { what: String },

    #[error("non-finite values in {what}")]
    NonFinite { what: String },

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: String,
        expected: usize,
        got: usize,
    },

    #[error("unobservable variables (zero total precision): {}", variables.join(", "))]
    Observability { variables: Vec<String> },

    #[error("scheduling error: {0}")]
    Scheduling(String),

    #[error("graph validation failed: {}", .0.join("; "))]
    Validation(Vec<String>),

    #[error("latent inversion failed after {steps} steps (loss trace tail: {trace:?})")]
    Inversion { steps: usize, trace: Vec<f64> },

    #[error("training failed at epoch {epoch}: {reason}")]
    Training { epoch: usize, reason: String },

    #[error("degenerate factor covariance: {0}")]
    Degenerate(String),

    #[error("graph is not connected (lambda2 = {lambda2:e})")]
    Connectivity { lambda2: f64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("{path}: line {line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("{path}: missing column `{column}`")]
    Schema { path: String, column: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("unsupported format: {0}")]
    Format(String),
}

impl Error {
    /// True for failures of the numerics (as opposed to bad input data).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Singular { .. }
                | Error::NonFinite { .. }
                | Error::Observability { .. }
                | Error::Inversion { .. }
                | Error::Training { .. }
                | Error::Degenerate(_)
                | Error::Connectivity { .. }
        )
    }

    pub(crate) fn singular(what: impl Into<String>) -> Self {
        Error::Singular { what: what.into() }
    }

    pub(crate) fn dim(what: impl Into<String>, expected: usize, got: usize) -> Self {
        Error::Dimension {
            what: what.into(),
            expected,
            got,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
