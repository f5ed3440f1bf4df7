//! Crate-wide error type.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    /// An operation received a value outside its documented domain.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A covariance (or other matrix) could not be inverted.
    #[error("singular matrix: {0}")]
    SingularMatrix(String),

    /// The rasterizer was handed non-finite splat data.
    #[error("render error: {0}")]
    Render(String),

    /// A backward pass was invoked without the intermediates it needs.
    #[error("state error: {0}")]
    State(String),

    /// Mismatched dimensions between module configuration and data.
    #[error("configuration error: {0}")]
    Config(String),

    /// A training-loop failure, annotated with iteration / parameter-group context.
    #[error("training error: {0}")]
    Train(String),

    /// Dataset or checkpoint files that do not parse.
    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
