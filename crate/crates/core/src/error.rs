use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("timestep {t} out of range 1..={steps}")]
    TimestepOutOfRange { t: usize, steps: usize },

    /// The measurement direction has no usable projection onto the codebook.
    #[error("degenerate measurement direction")]
    Degenerate,

    #[error("inner products are not sorted in descending order at position {0}")]
    NotSorted(usize),

    #[error("exhaustive search needs {cost} evaluations, budget is {budget}")]
    BudgetExceeded { cost: u128, budget: u128 },

    #[error("format error: {0}")]
    Format(String),

    #[error("payload length error: expected {expected} bytes, got {actual}")]
    Length { expected: usize, actual: usize },

    #[error("unknown prior id {0}")]
    UnknownPrior(u32),
}

impl Error {
    pub(crate) fn mismatch(expected: usize, actual: usize) -> Self {
        Error::DimensionMismatch { expected, actual }
    }
}
