use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("invalid spin configuration: {0}")]
    InvalidConfig(String),

    #[error("window overrun: {0}")]
    Window(String),

    #[error("event budget of {cap} exhausted at time {time}")]
    EventBudget { cap: usize, time: f64 },

    #[error("replay mismatch at snapshot {snapshot}, site {site}: relative error {rel_err:e}")]
    ReplayMismatch { snapshot: usize, site: usize, rel_err: f64 },

    #[error("residual at a non-slow bond is {value:e}, above tolerance {tol:e}")]
    NonSlowResidual { value: f64, tol: f64 },

    #[error("kernel grid: {0}")]
    KernelGrid(String),

    #[error("CFL violation: dt = {dt:e} exceeds dx^2/2 = {limit:e}")]
    Cfl { dt: f64, limit: f64 },

    #[error("normalization mismatch: {0}")]
    Normalization(String),

    #[error("schema mismatch in {path}: {reason}")]
    Schema { path: PathBuf, reason: String },

    #[error("unknown suite `{0}`")]
    UnknownSuite(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),

    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
