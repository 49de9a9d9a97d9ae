use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch in {dim}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        dim: String,
        expected: usize,
        got: usize,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("unsupported format version {found} in {path} (expected {expected})")]
    Version {
        path: PathBuf,
        found: String,
        expected: String,
    },

    #[error(
        "training diverged at step {step} (lr {lr}, batch seed {batch_seed:#018x}): loss is {loss}"
    )]
    Diverged {
        step: usize,
        lr: f32,
        batch_seed: u64,
        loss: f32,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, dim: impl Into<String>, expected: usize, got: usize) -> Self {
        Error::Shape {
            op,
            dim: dim.into(),
            expected,
            got,
        }
    }

    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
