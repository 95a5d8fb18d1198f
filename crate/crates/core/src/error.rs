//! Error taxonomy shared across the crate.
//!
//! The variants mirror how failures are reported to callers and, through the CLI, to exit
//! codes: configuration problems (unknown names, out-of-range parameters) exit with 2,
//! solver divergence exits with 3 and still carries the iteration report for post-mortems,
//! and everything else is an ordinary failure.

use thiserror::Error;

use crate::lipschitz::SolverReport;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes surfaced by the solver laboratory.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value is out of range, inconsistent, or names an unknown builtin.
    #[error("config error: {0}")]
    Config(String),

    /// An input violates a documented precondition (non-finite samples, wrong dimensions, ...).
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// A caller broke an interface contract (missing lower triangle, undeclared feature, ...).
    #[error("contract violated: {0}")]
    Contract(String),

    /// The normal equations are numerically singular and no ridge was allowed.
    #[error("numerical rank failure: {0}")]
    NumericalRank(String),

    /// An allocation request exceeds the configured memory budget.
    #[error("capacity exceeded: {0}")]
    Capacity(String),

    /// The fixed-point iteration failed to contract; the partial report is attached.
    #[error("solver divergence: {message}")]
    Divergence {
        message: String,
        report: Box<SolverReport>,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Exit code the CLI maps this error to.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Divergence { .. } => 3,
            _ => 1,
        }
    }
}
