use std::fmt;

/// Errors produced by tensor operations, QnA layers, model assembly and I/O.
#[derive(Debug)]
pub enum QnaError {
    /// Operand shapes are incompatible with the operation.
    ShapeMismatch {
        op: &'static str,
        detail: String,
    },
    /// A scalar argument or configuration value is out of its domain.
    InvalidArgument {
        op: &'static str,
        detail: String,
    },
    /// An operation produced (or was handed) a NaN or infinity.
    NonFinite {
        op: &'static str,
    },
    /// A softmax normalizer underflowed to exactly zero.
    NumericalRange {
        op: &'static str,
        detail: String,
    },
    /// Malformed tensor container or manifest.
    Format(String),
    Io(std::io::Error),
}

pub type Result<T> = std::result::Result<T, QnaError>;

impl QnaError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        QnaError::ShapeMismatch { op, detail: detail.into() }
    }

    pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        QnaError::InvalidArgument { op, detail: detail.into() }
    }
}

impl fmt::Display for QnaError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            QnaError::ShapeMismatch { op, detail } => write!(f, "{op}: shape mismatch: {detail}"),
            QnaError::InvalidArgument { op, detail } => write!(f, "{op}: invalid argument: {detail}"),
            QnaError::NonFinite { op } => write!(f, "{op}: non-finite value"),
            QnaError::NumericalRange { op, detail } => {
                write!(f, "{op}: numerical range exceeded: {detail}")
            }
            QnaError::Format(msg) => write!(f, "format error: {msg}"),
            QnaError::Io(err) => write!(f, "i/o error: {err}"),
        }
    }
}

impl std::error::Error for QnaError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            QnaError::Io(err) => Some(err),
            _ => None,
        }
    }
}

impl From<std::io::Error> for QnaError {
    fn from(err: std::io::Error) -> Self {
        QnaError::Io(err)
    }
}

impl From<serde_json::Error> for QnaError {
    fn from(err: serde_json::Error) -> Self {
        QnaError::Format(err.to_string())
    }
}

impl From<csv::Error> for QnaError {
    fn from(err: csv::Error) -> Self {
        if err.is_io_error() {
            match err.into_kind() {
                csv::ErrorKind::Io(io) => QnaError::Io(io),
                other => QnaError::Format(format!("{other:?}")),
            }
        } else {
            QnaError::Format(err.to_string())
        }
    }
}
