use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite value at position {0}")]
    NonFinite(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("row {row} is not a probability distribution (sum {sum})")]
    NotNormalized { row: usize, sum: f64 },

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("pool error: {0}")]
    Pool(String),

    #[error("data format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(String),

    #[error("leakage guard: target-test index {0} reached a selection or training path")]
    Leakage(usize),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
