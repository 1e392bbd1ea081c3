use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not fit the operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// A configuration value is outside its allowed range.
    #[error("config error: {0}")]
    Config(String),

    /// A caller violated an operation's precondition.
    #[error("contract error: {0}")]
    Contract(String),

    /// A numeric guard fired (zero norm, non-finite value, ...).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Training produced a non-finite loss.
    #[error("non-finite loss at step {step} (lr={lr:e}, grad norms: {grad_norms})")]
    NumericAbort {
        step: usize,
        lr: f64,
        grad_norms: String,
    },

    /// Malformed or incompatible file contents.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
