//! Error type shared across the workspace.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Grid quadrature left too much probability mass at its boundary.
    #[error("grid boundary holds mass {boundary_mass:.3e} (> {limit:.1e}); widen the range beyond {half_width} half-widths")]
    GridBoundaryMass {
        boundary_mass: f64,
        limit: f64,
        half_width: f64,
    },

    #[error("no proposal accepted after burn-in; try a proposal scale smaller than {scale}")]
    ZeroAcceptance { scale: f64 },

    #[error("aborting at step {step}: {reason}")]
    NumericAbort { step: usize, reason: String },

    /// Line search could not increase the objective; carries the recent
    /// (a2, b2, value) iterates for diagnosis.
    #[error("line search exhausted without ascent; recent iterates: {history:?}")]
    LineSearchFailed { history: Vec<(f64, f64, f64)> },

    #[error("E-step failed in round {round}: {source}")]
    EStep {
        round: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("format error: {0}")]
    Format(String),
}
