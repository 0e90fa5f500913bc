use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = HvaeError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum HvaeError {
    /// A caller broke an operation's precondition (shape, range, mode).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("shape mismatch in {op}: expected {expected:?}, got {actual:?}")]
    Shape {
        op: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("phantom generation failed: {0}")]
    Generation(String),

    #[error("non-finite {term} at iteration {iteration}")]
    NonFinite { iteration: u64, term: String },

    #[error("checkpoint does not match configuration: {0}")]
    Mismatch(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl HvaeError {
    pub fn contract(msg: impl Into<String>) -> Self {
        HvaeError::Contract(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HvaeError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        HvaeError::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub(crate) fn check_shape(op: &'static str, expected: &[usize], actual: &[usize]) -> Result<()> {
    if expected != actual {
        return Err(HvaeError::Shape {
            op,
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        });
    }
    Ok(())
}
