use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes are incompatible for an operation.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A caller-supplied value is out of its documented range.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A model or training configuration violates one of its constraints.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A dataset or config file could not be parsed. Lines are 1-based.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// A checkpoint file is malformed, truncated, or inconsistent.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// A dataset cannot be split into the requested folds.
    #[error("split error: {0}")]
    Split(String),

    /// A batch sequence violates the model's input contract.
    #[error("input error for sequence {index}: {msg}")]
    Input { index: usize, msg: String },

    /// Training produced a non-finite loss.
    #[error("training diverged at step {step}: loss is {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
