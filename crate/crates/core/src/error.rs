use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    Numeric { op: String },

    #[error("empty input to {0}")]
    EmptyInput(&'static str),

    #[error("query vector has zero norm")]
    DegenerateQuery,

    #[error("selection contains no indices")]
    EmptySelection,

    #[error("config error: {0}")]
    Config(String),

    #[error("unknown token id {id} (vocabulary size {size})")]
    Vocabulary { id: usize, size: usize },

    #[error("label {label} out of range for vocabulary of {size}")]
    Label { label: usize, size: usize },

    #[error("bookkeeping error: {0}")]
    Bookkeeping(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("function is not deterministic: two forward passes gave {first} and {second}")]
    Determinism { first: f64, second: f64 },

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(Error::Dimension {
        op,
        detail: detail.into(),
    })
}
