//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration (bad dimensions, bad hyper-parameters, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Tensor/vector shapes do not chain consistently.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A non-finite value appeared where a finite one is required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// API misuse (stale caches, dimension guards, empty ranges, ...).
    #[error("usage error: {0}")]
    Usage(String),

    /// Malformed or inconsistent data (lattices, references, datasets).
    #[error("data error: {0}")]
    Data(String),

    /// CG detected non-positive curvature `p^T B p` on the given direction.
    #[error("conjugate gradient abort: non-positive curvature {curvature:.6e}")]
    NonSpdCurvature { curvature: f64 },

    /// Text-format parse failure with location information.
    #[error("parse error ({context}, line {line}): {message}")]
    Parse {
        context: String,
        line: usize,
        message: String,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
}
