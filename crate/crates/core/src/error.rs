use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the estimation toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("longitudinal velocity {vx} m/s is at or below the slip-angle guard")]
    DegenerateSpeed { vx: f64 },

    #[error("simulation diverged at step {step}: non-finite state")]
    SimDiverged { step: usize },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("time column not strictly increasing at row {row}")]
    Monotonicity { row: usize },

    #[error("insufficient data: need at least {needed} samples, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("freezing {requested} of {blocks} parameter blocks leaves no active hidden layer")]
    FreezeTooDeep { requested: usize, blocks: usize },

    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },

    #[error("iteration budget must be positive")]
    InvalidBudget,

    #[error("innovation covariance is singular")]
    SingularInnovation,

    #[error("coefficient schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("empty input")]
    EmptyInput,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
