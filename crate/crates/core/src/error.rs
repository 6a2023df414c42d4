use thiserror::Error;

/// Errors raised by tensor arithmetic, fusion operators, models and training.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("training diverged at iteration {iter}: {msg}")]
    Diverged { iter: usize, msg: String },
    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
