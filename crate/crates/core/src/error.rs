use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid partition: grid size {size} is not divisible by {parts} patches per axis")]
    InvalidPartition { size: usize, parts: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfiguration(String),

    #[error("unsupported kernel variant: {0}")]
    UnsupportedVariant(String),

    #[error("all singular values are below the truncation tolerance {tol:e}")]
    RankZero { tol: f64 },

    #[error("singular system: {0}")]
    Singular(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed data: {0}")]
    Parse(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
