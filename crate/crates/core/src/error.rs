use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid attention mask: row {row} has no allowed entry")]
    InvalidMask { row: usize },

    #[error("empty sequence: {0}")]
    EmptySequence(&'static str),

    #[error("non-finite value produced by {op}")]
    Numeric { op: String },

    #[error("sequence of length {len} exceeds the limit of {max}")]
    Length { len: usize, max: usize },

    #[error("inconsistent inputs: {0}")]
    Consistency(String),

    #[error("invalid span-mask spec: {0}")]
    Spec(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(&'static str),

    #[error("training diverged at step {step}: loss {loss}")]
    Divergence { step: u64, loss: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Numeric { .. } | Error::Divergence { .. } => 3,
            _ => 2,
        }
    }
}
