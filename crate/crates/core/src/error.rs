use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents do not fit the operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid configuration value (geometry, head counts, fold counts, ...).
    #[error("config error: {0}")]
    Config(String),

    /// A caller broke an operation's contract (non-scalar loss, missing gradient, bad label).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Malformed sample, manifest or checkpoint file.
    #[error("format error in {field}: {message}")]
    Format { field: String, message: String },

    /// A loss term or value became NaN or infinite.
    #[error("numerical failure in {term}: value {value}")]
    Numerical { term: String, value: f64 },

    /// A checkpoint does not fit the model it is loaded into.
    #[error("incompatible checkpoint at {parameter}: {message}")]
    Compatibility { parameter: String, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn format(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn compat(parameter: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Compatibility {
            parameter: parameter.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
