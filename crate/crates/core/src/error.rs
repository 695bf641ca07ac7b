use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("bad magic number {found:#010x} in {path}, expected {expected:#010x}")]
    BadMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },

    #[error("image file holds {images} items but label file holds {labels}")]
    CountMismatch { images: usize, labels: usize },

    #[error("file {path} is truncated")]
    TruncatedFile { path: PathBuf },

    #[error("label {label} is out of range for {class_count} classes")]
    InvalidLabel { label: usize, class_count: usize },

    #[error("removing samples would leave class {0} empty")]
    EmptyResult(usize),

    #[error("class {0} has no training samples")]
    EmptyClass(usize),

    #[error("gradient contains non-finite entries")]
    NonFiniteGradient,

    #[error("loss became non-finite at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },

    #[error("solver did not converge within {0} iterations")]
    NoConvergence(usize),

    #[error("linear system is singular")]
    SingularSystem,

    #[error("every gradient row is zero")]
    DegenerateBank,

    #[error("alignment is undefined for a zero gradient")]
    ZeroGradient,

    #[error("{0} elements is too many for exhaustive search")]
    TooLarge(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("usage: {0}")]
    Usage(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("corrupt record: {0}")]
    CorruptRecord(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
