use std::path::PathBuf;

/// Errors raised anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("attack failed at iteration {iteration}: {reason}")]
    Attack { iteration: usize, reason: String },

    #[error("bad magic in {path}: expected {expected:?}")]
    BadMagic { path: PathBuf, expected: &'static str },

    #[error("unsupported format version {found} in {path} (expected {expected})")]
    Version { path: PathBuf, found: u32, expected: u32 },

    #[error("file {path} is truncated while reading {what}")]
    Truncated { path: PathBuf, what: String },

    #[error("parse error at line {line}: {detail}")]
    Parse { line: usize, detail: String },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
