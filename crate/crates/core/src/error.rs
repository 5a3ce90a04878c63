use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("flow failure at lambda = {lambda}: log-condition {log_condition:.3} exceeds the guard")]
    FlowFailure { lambda: f64, log_condition: f64 },
    #[error("all particle weights are zero or non-finite")]
    DegenerateWeights,
    #[error("invalid state: {0}")]
    State(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("metric error: {0}")]
    Metric(String),
    #[error("integrator did not converge: {0}")]
    Integrator(String),
    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
