use std::fmt;

/// Errors from tensor construction, tape operations and checkpoint IO.
#[derive(Debug)]
pub enum TensorError {
    /// Operand dimensions do not line up; `detail` names the offending dims.
    ShapeMismatch { op: &'static str, detail: String },
    /// Backward was requested on a non-scalar root.
    NotScalar { shape: Vec<usize> },
    /// A `Var` does not belong to this tape.
    OffTape,
    /// Invalid argument (bad stride, zero divisor, unsupported size, ...).
    InvalidArg { op: &'static str, detail: String },
    Io(std::io::Error),
    /// Checkpoint file is malformed.
    Format(String),
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::ShapeMismatch { op, detail } => {
                write!(f, "shape mismatch in {op}: {detail}")
            }
            TensorError::NotScalar { shape } => {
                write!(f, "backward root must be a scalar, got shape {shape:?}")
            }
            TensorError::OffTape => write!(f, "variable is not on this tape"),
            TensorError::InvalidArg { op, detail } => write!(f, "invalid argument to {op}: {detail}"),
            TensorError::Io(e) => write!(f, "io error: {e}"),
            TensorError::Format(msg) => write!(f, "bad checkpoint: {msg}"),
        }
    }
}

impl std::error::Error for TensorError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            TensorError::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for TensorError {
    fn from(e: std::io::Error) -> Self {
        TensorError::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, TensorError>;
