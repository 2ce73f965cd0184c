//! Crate-wide error type.
//!
//! One enum covers the whole pipeline so that the CLI can map failures to
//! its exit-code contract in a single place: configuration and validation
//! problems, hypothesis refusals (a requested computation whose standing
//! assumptions demonstrably fail), and numeric faults detected mid-run.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("probabilities must be in (0, 1] and sum to 1 (got sum {sum})")]
    ProbabilityMass { sum: f64 },

    #[error("empty ensemble: at least one replica is required")]
    EmptyEnsemble,

    #[error("insufficient exceedances: needed {needed}, found {found} above threshold {threshold}")]
    InsufficientExceedances {
        needed: usize,
        found: usize,
        threshold: f64,
    },

    #[error("degenerate order statistics: {0}")]
    DegenerateOrderStats(String),

    #[error("non-finite value produced at step {step}: {context}")]
    NonFinite { step: usize, context: String },

    #[error("contractivity precheck failed: {0}")]
    ContractivityPrecheck(String),

    #[error("hypothesis refused: {0}")]
    HypothesisRefused(String),

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Exit code the CLI reports for this failure.
    ///
    /// 2: configuration/schema errors, 3: hypothesis refusals,
    /// 4: numeric faults, 1: everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Json(_) => 2,
            Error::HypothesisRefused(_) | Error::ContractivityPrecheck(_) => 3,
            Error::NonFinite { .. } => 4,
            _ => 1,
        }
    }
}
