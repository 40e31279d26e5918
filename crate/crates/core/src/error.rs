use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid flow rate: {name} = {value} (must be finite and non-negative)")]
    NegativeFlow { name: &'static str, value: f64 },

    #[error("plant rollout diverged (non-finite state)")]
    Diverged,

    #[error(
        "no steady state reached within {hours} h of simulated time (residual {residual:.3e})"
    )]
    NoSteadyState { hours: f64, residual: f64 },

    #[error("set point {y_set} is not bracketed by the steady map (max reachable {y_max})")]
    SetpointInfeasible { y_set: f64, y_max: f64 },

    #[error("infeasible search box in dimension {dim}: lb {lb} > ub {ub}")]
    InfeasibleBox { dim: usize, lb: f64, ub: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV error on {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("scenario parse error in {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: toml::de::Error,
    },
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
