use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("entry {index} is {value}, expected -1 or +1")]
    InvalidSign { index: usize, value: f64 },
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("axis {axis} out of range for order {order}")]
    AxisOutOfRange { axis: usize, order: usize },
    #[error("empty tensor (shape {0:?})")]
    Empty(Vec<usize>),
    #[error("instance too large: {0}")]
    TooLarge(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("zero denominator")]
    ZeroDenominator,
    #[error("format error: {0}")]
    Format(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
