//! Error taxonomy shared across the workspace.
//!
//! The CLI maps these onto exit codes: config errors → 1, data/parse/load
//! errors → 2, numeric failures → 3.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape or dimension disagreement between tensors; the message names
    /// both shapes involved.
    #[error("dimension error: {0}")]
    Dim(String),

    /// Invalid configuration (layer chains, feature widths, margins, ...).
    #[error("config error: {0}")]
    Config(String),

    /// Dataset-level problems: singleton classes, empty directories,
    /// inconsistent widths.
    #[error("data error: {0}")]
    Data(String),

    /// Textual input that could not be parsed; carries the 1-based row.
    #[error("parse error at row {row}: {msg}")]
    Parse { row: usize, msg: String },

    /// API contract violation (e.g. backward from a non-scalar root).
    #[error("contract error: {0}")]
    Contract(String),

    /// Numeric failure during optimization; names the step and parameter.
    #[error("training error at step {step} ({name}): {msg}")]
    Training {
        step: usize,
        name: String,
        msg: String,
    },

    /// A value that must be finite was NaN or infinite.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("i/o error on {path}: {source}")]
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
}

pub type Result<T> = std::result::Result<T, Error>;
