use thiserror::Error;

/// Errors produced by the statistical core and the oracle plumbing.
#[derive(Debug, Error)]
pub enum CpqError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// An estimator was evaluated on an empty tally (t = 0).
    #[error("estimate undefined for an empty tally")]
    UndefinedEstimate,

    #[error("label {0} has not been observed")]
    UnknownLabel(u64),

    /// A replay record ran out of pre-recorded samples.
    #[error("oracle source for input {input:?} exhausted after {available} samples")]
    BudgetExhausted { input: String, available: usize },

    #[error("oracle i/o error: {0}")]
    OracleIo(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("duplicate record id {0:?}")]
    DuplicateId(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// No candidate threshold reached the requested coverage.
    #[error("no threshold reaches coverage {target:.4} (best {best_coverage:.4} at tau {best_tau})")]
    InfeasibleCalibration {
        target: f64,
        best_tau: f64,
        best_coverage: f64,
    },

    #[error("calibration model mismatch: {0}")]
    ModelMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = CpqError> = std::result::Result<T, E>;
