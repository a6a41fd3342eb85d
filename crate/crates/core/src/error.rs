use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition (bad window length, token out of range, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// The model or run configuration does not know about something it was asked for.
    #[error("configuration error: {0}")]
    Config(String),

    /// Exhaustive enumeration would exceed the configured path budget.
    #[error("enumeration budget exceeded: {paths} paths requested, cap is {cap}")]
    EnumerationBudget { paths: u128, cap: u128 },

    /// A log-probability of an action that has exactly zero mass.
    #[error("numerical guard: {0}")]
    Numerical(String),

    #[error("training diverged at batch {batch}: mean |residual| = {mean_abs_residual}")]
    Diverged { batch: usize, mean_abs_residual: f64 },

    #[error("missing checkpoint manifest at {0}")]
    MissingCheckpoint(PathBuf),

    #[error("malformed document {path}: {message}")]
    Malformed { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
