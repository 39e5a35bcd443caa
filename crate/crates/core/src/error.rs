use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("operator is not positive definite: {0}")]
    Definiteness(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("operator does not support {0}")]
    Unsupported(&'static str),

    #[error("covariance factorization failed (smallest eigenvalue estimate {min_eigenvalue:e})")]
    Factorization { min_eigenvalue: f64 },

    #[error("initial residual is zero; nothing to solve")]
    ZeroResidual,

    #[error("solution-space breakdown at iteration {k}: t_kk = {value:e}")]
    VBreakdown { k: usize, value: f64 },

    #[error("projected system is numerically singular; use nonzero regularization parameters")]
    RankDeficient,

    #[error("degenerate GCV denominator {0:e}")]
    DegenerateDenominator(f64),

    #[error("parameter selection failed: {0}")]
    Selection(String),

    #[error("no convergence after {iterations} iterations (last relative change {last_change:e})")]
    NoConvergence { iterations: usize, last_change: f64 },

    #[error("problem too large: {0} unknowns")]
    TooLarge(usize),

    #[error("sweep {sweep}: {source}")]
    Sweep {
        sweep: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error: {0}")]
    Io(String),

    #[error("malformed problem container: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension {
            context,
            expected,
            got,
        })
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
