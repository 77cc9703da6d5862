use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed container header or unknown file layout.
    #[error("format error: {0}")]
    Format(String),

    /// Payload length or content disagrees with its header.
    #[error("corrupt payload: {0}")]
    Corruption(String),

    /// A type or operation precondition was violated.
    #[error("validation error: {0}")]
    Validation(String),

    /// Tensor shapes are incompatible with a network or operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// The input is structurally valid but numerically degenerate.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// A non-finite value appeared during optimization.
    #[error("training diverged: {0}")]
    Divergence(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by bad input rather than by a failing run.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Format(_)
            | Error::Corruption(_)
            | Error::Validation(_)
            | Error::Shape(_)
            | Error::Degenerate(_)
            | Error::Json(_) => true,
            Error::Io(e) => e.kind() == std::io::ErrorKind::NotFound,
            Error::Divergence(_) => false,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! ensure {
    ($cond:expr, $variant:ident, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::$variant(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
