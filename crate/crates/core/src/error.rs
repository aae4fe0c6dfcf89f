use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch, {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("infeasible scenario: {0}")]
    Infeasible(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { expected: u32, found: u32 },

    #[error("bad magic bytes in {0}")]
    Magic(&'static str),

    #[error("unexpected end of data while reading {0}")]
    Truncated(&'static str),

    #[error("corrupt data: {0}")]
    Corrupt(String),

    #[error("checkpoint manifest mismatch: missing {missing:?}, extra {extra:?}, reshaped {reshaped:?}")]
    Manifest {
        missing: Vec<String>,
        extra: Vec<String>,
        reshaped: Vec<String>,
    },

    #[error("non-finite loss on sequence with seed {seed}")]
    NonFinite { seed: u64 },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
