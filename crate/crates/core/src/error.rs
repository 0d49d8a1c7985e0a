use thiserror::Error;

/// Errors raised by the tensor engine, the pruning machinery and the I/O layer.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("domain error in {op}: {msg}")]
    Domain { op: &'static str, msg: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward: {0}")]
    Backward(String),
    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("corpus: {0}")]
    Corpus(String),
    #[error("metrics: {0}")]
    Metrics(String),
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: u64, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// Short machine-friendly tag for the error category.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::Domain { .. } => "domain",
            Error::NonFinite { .. } => "non_finite",
            Error::Backward(_) => "backward",
            Error::Index { .. } => "index",
            Error::Invalid(_) => "invalid",
            Error::Config(_) => "config",
            Error::Checkpoint(_) => "checkpoint",
            Error::Corpus(_) => "corpus",
            Error::Metrics(_) => "metrics",
            Error::Diverged { .. } => "diverged",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
