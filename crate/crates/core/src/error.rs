use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite (tried diagonal jitter up to {max_jitter:e})")]
    NotPositiveDefinite { max_jitter: f64 },

    #[error("block {block} is not positive definite")]
    BlockNotPositiveDefinite { block: usize },

    #[error("matrix is not symmetric: |A[{i},{j}] - A[{j},{i}]| = {diff:e}")]
    NotSymmetric { i: usize, j: usize, diff: f64 },

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    #[error("cluster id {id} out of range (feature {feature} has {max} levels)")]
    IdOutOfRange {
        feature: usize,
        id: usize,
        max: usize,
    },

    #[error("parameter index {index} out of range ({len} parameters)")]
    ParamIndexOutOfRange { index: usize, len: usize },

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("non-finite gradient for parameter '{param}'")]
    NonFiniteGradient { param: String },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("quadrature order {0} out of range (1..=50)")]
    QuadratureOrder(usize),

    #[error("AUC requires both classes present")]
    SingleClass,

    #[error("empty input to {0}")]
    EmptyInput(&'static str),

    #[error("covariance structure admits no block-diagonal partition")]
    NoBlockStructure,

    #[error("one-hot encoding refused: {q} levels exceed the configured cap of {cap} columns")]
    OheTooWide { q: usize, cap: usize },

    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },

    #[error("parse error in {path}: {msg}")]
    Parse { path: String, msg: String },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
