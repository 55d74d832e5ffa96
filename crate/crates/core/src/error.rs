use thiserror::Error;

/// Every fallible operation in the crate returns this error.
#[derive(Debug, Error)]
pub enum AmError {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    /// The log-argument of a log-scaled energy is not positive, e.g. a
    /// state outside every support of a log-sum-relu energy.
    #[error("infinite energy: {0}")]
    InfiniteEnergy(String),

    #[error("infeasible start: {0}")]
    InfeasibleStart(String),

    #[error("energy undefined: {0}")]
    UndefinedEnergy(String),

    /// Random-feature inner product fell to or below zero so its log is
    /// undefined.
    #[error("approximation breakdown: kernel estimate {0} is not positive")]
    ApproximationBreakdown(f64),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("diverged: {0}")]
    Diverged(String),

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, AmError>;

pub(crate) fn check_len(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(AmError::DimensionMismatch { expected, found })
    }
}

pub(crate) fn check_finite(x: f64, what: &str) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(AmError::NonFinite(what.to_string()))
    }
}

pub(crate) fn check_positive(x: f64, what: &str) -> Result<()> {
    if x.is_finite() && x > 0.0 {
        Ok(())
    } else {
        Err(AmError::OutOfRange(format!(
            "{what} must be positive and finite, got {x}"
        )))
    }
}
