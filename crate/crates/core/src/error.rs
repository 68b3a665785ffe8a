use thiserror::Error;

/// Errors produced by the calibration library.
#[derive(Debug, Error)]
pub enum SpiError {
    /// An argument violates a mathematical precondition.
    #[error("domain error: {0}")]
    Domain(String),

    /// Inputs are individually valid but inconsistent with each other.
    #[error("configuration error: {0}")]
    Config(String),

    /// Tied scores where the procedure requires distinct values.
    #[error(
        "tied scores in {context}: {count} duplicate value(s); add a negligible \
         i.i.d. Uniform[-delta, delta] jitter so the scores are continuous"
    )]
    Ties { context: String, count: usize },

    /// Least-squares fit with a constant regressor.
    #[error("degenerate fit: {0}")]
    Degenerate(String),

    /// No grid value satisfies the requested target.
    #[error("no solution: {0}")]
    NoSolution(String),

    #[error("quadrature did not reach tolerance {tolerance:e}; best estimate {estimate}")]
    Quadrature { estimate: f64, tolerance: f64 },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl SpiError {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        SpiError::Domain(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        SpiError::Config(msg.into())
    }

    /// Short machine-readable tag for the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            SpiError::Domain(_) => "domain",
            SpiError::Config(_) => "config",
            SpiError::Ties { .. } => "ties",
            SpiError::Degenerate(_) => "degenerate",
            SpiError::NoSolution(_) => "no_solution",
            SpiError::Quadrature { .. } => "quadrature",
            SpiError::Io(_) => "io",
            SpiError::Csv(_) => "csv",
            SpiError::Json(_) => "json",
        }
    }
}

pub type Result<T, E = SpiError> = std::result::Result<T, E>;
