use std::fmt;

#[derive(Debug)]
pub enum DataError {
    Io(std::io::Error),
    /// Malformed snippet/scene/manifest file.
    Format(String),
    InvalidConfig(String),
    /// Scene budget exhausted before the requested split sizes were met.
    InsufficientDetections { wanted: (usize, usize, usize), achieved: (usize, usize, usize) },
    /// Background covariance stayed singular even after regularization.
    SingularCovariance,
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataError::Io(e) => write!(f, "io error: {e}"),
            DataError::Format(msg) => write!(f, "format error: {msg}"),
            DataError::InvalidConfig(msg) => write!(f, "invalid config: {msg}"),
            DataError::InsufficientDetections { wanted, achieved } => write!(
                f,
                "insufficient detections: wanted pretrain/train/test {wanted:?}, achieved {achieved:?}"
            ),
            DataError::SingularCovariance => {
                write!(f, "background covariance singular after regularization")
            }
        }
    }
}

impl std::error::Error for DataError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            DataError::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for DataError {
    fn from(e: std::io::Error) -> Self {
        DataError::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, DataError>;
