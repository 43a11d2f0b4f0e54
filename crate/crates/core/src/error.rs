use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value is unusable (empty widths, K < 2, unknown dataset, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller broke an operation's precondition (shape mismatch, sigma <= 0, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// The field is singular at the queried point.
    #[error("field singularity: {0}")]
    Singularity(String),

    /// Wrong sampling path for the requested auxiliary dimension.
    #[error("dispatch error: {0}")]
    Dispatch(String),

    /// Training produced a non-finite or exploding quantity.
    #[error("training error: {message}")]
    Training {
        message: String,
        /// Free-form diagnostic pairs (sigma, loss components, ...).
        diagnostics: Vec<(String, f64)>,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn training(msg: impl Into<String>, diagnostics: Vec<(String, f64)>) -> Self {
        Error::Training {
            message: msg.into(),
            diagnostics,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
