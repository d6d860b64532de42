use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("negative variance entry {value} at index {index}")]
    NegativeVariance { index: usize, value: f64 },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("idx: wrong magic number {found:#010x}, expected {expected:#010x}")]
    IdxMagic { expected: u32, found: u32 },
    #[error("idx: truncated file {0}")]
    IdxTruncated(String),
    #[error("idx: {images} images but {labels} labels")]
    IdxCountMismatch { images: usize, labels: usize },
    #[error("io: {0}")]
    Io(String),
    #[error("malformed parameter stream: {0}")]
    Format(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
