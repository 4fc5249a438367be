use thiserror::Error;

/// Errors surfaced by tensor operations, geometry, file formats and training.
#[derive(Error, Debug)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    DimMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    Domain { op: &'static str, msg: String },

    #[error("{op}: contract violation: {msg}")]
    Contract { op: &'static str, msg: String },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("instance too large for exhaustive enumeration: H={h}, r={r} (limits H<=8, r<=6)")]
    SizeLimit { h: usize, r: usize },

    #[error("config: {0}")]
    Config(String),

    #[error("scene generation: {0}")]
    Generation(String),

    #[error("format error in {path}: {msg}")]
    Format { path: String, msg: String },

    #[error("training diverged: loss is not finite at epoch {epoch}")]
    NanLoss { epoch: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn domain(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Domain {
            op,
            msg: msg.into(),
        }
    }

    pub fn contract(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Contract {
            op,
            msg: msg.into(),
        }
    }
}
