use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = FwlError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FwlError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },

    #[error("invalid config `{field}`: {msg}")]
    Config { field: String, msg: String },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("stream state mismatch: {0}")]
    State(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("bad checkpoint: {0}")]
    Format(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl FwlError {
    pub fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        FwlError::Config {
            field: field.into(),
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FwlError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 1 usage/config, 2 I/O, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            FwlError::Io { .. } | FwlError::Format(_) => 2,
            FwlError::Numerical(_) => 3,
            _ => 1,
        }
    }
}
