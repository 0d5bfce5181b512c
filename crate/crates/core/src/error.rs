use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = IdpError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum IdpError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("configuration error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("state error: {0}")]
    State(String),

    #[error("format error in {file}: {message} (byte offset {offset})")]
    Format {
        file: String,
        offset: u64,
        message: String,
    },

    #[error("label out of range in {file}: record {index} has label {label}, expected < {classes}")]
    LabelRange {
        file: String,
        index: usize,
        label: u8,
        classes: usize,
    },

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl IdpError {
    pub fn argument(msg: impl Into<String>) -> Self {
        IdpError::Argument(msg.into())
    }

    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        IdpError::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn dims(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        IdpError::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        IdpError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            IdpError::Config { .. } | IdpError::Argument(_) => 2,
            IdpError::Divergence { .. } => 4,
            IdpError::Format { .. }
            | IdpError::LabelRange { .. }
            | IdpError::Version { .. }
            | IdpError::Io { .. } => 3,
            IdpError::Dimension { .. } | IdpError::State(_) => 1,
        }
    }
}
