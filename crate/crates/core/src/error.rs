//! Error type shared by every module.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A specification field failed validation.
    #[error("invalid configuration `{field}`: {reason}")]
    Config { field: String, reason: String },

    /// An argument lies outside the domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A model failed to satisfy one of its declared contracts at runtime.
    #[error("model contract violated: {0}")]
    ModelContract(String),

    /// The radius ladder ran out before the coercivity inequality held.
    #[error("coercivity too weak: {0}")]
    CoercivityTooWeak(String),

    #[error("cell problem infeasible: {0}")]
    Infeasible(String),

    #[error("query outside table hull: {0}")]
    Extrapolation(String),

    /// The sup of a Hamiltonian sat on the boundary of the control grid.
    #[error("supremum attained on the control-grid boundary (radius {radius})")]
    RadiusTooSmall { radius: f64 },

    #[error("CFL condition violated: dt = {dt} exceeds the stable step {suggested}")]
    Cfl { dt: f64, suggested: f64 },

    /// The bounded-control repair needs a larger target radius.
    #[error("repair radius {given} is below the required radius {required}")]
    RepairThreshold { given: f64, required: f64 },

    #[error("malformed artifact: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Format(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}
