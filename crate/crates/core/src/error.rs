use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("training diverged at step {step}: {source}\n{gates}")]
    Diverged {
        step: u64,
        source: Box<Error>,
        /// Per-gate statistics at the failing step.
        gates: String,
    },

    #[error("config line {line}: key `{key}`: {message}")]
    Config {
        key: String,
        line: usize,
        message: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint config mismatch at key `{key}`")]
    ConfigMismatch { key: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Non-finite arithmetic, directly or as the cause of a divergence.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::Diverged { .. })
    }


    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
