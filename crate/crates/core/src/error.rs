use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke a documented precondition (shapes, ranges, unit norms).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: String,
        expected: String,
        got: String,
    },

    /// A row collapsed to zero or non-finite norm and cannot be mapped back onto the sphere.
    #[error("retraction failed for {context}: norm = {norm}")]
    Retraction { context: String, norm: f64 },

    #[error("non-finite gradient for parameter `{param}` at index {index}; step rejected")]
    NonFiniteGradient { param: String, index: usize },

    #[error("finite-difference oracle failed: f evaluated to {value} at coordinate {coord}")]
    Oracle { coord: usize, value: f64 },

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("initialization error: {0}")]
    Init(String),

    #[error("parse error in {path} line {line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn shape(
        context: impl Into<String>,
        expected: impl std::fmt::Display,
        got: impl std::fmt::Display,
    ) -> Self {
        Error::Shape {
            context: context.into(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the error stems from the numbers themselves rather than from inputs or I/O.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Retraction { .. }
                | Error::NonFiniteGradient { .. }
                | Error::Oracle { .. }
                | Error::Divergence { .. }
                | Error::Contract(_)
                | Error::Shape { .. }
                | Error::Init(_)
        )
    }

    pub fn is_io(&self) -> bool {
        matches!(
            self,
            Error::Io { .. } | Error::Parse { .. } | Error::Json(_)
        )
    }
}
