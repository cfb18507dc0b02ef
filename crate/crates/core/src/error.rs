use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch on {axis} axis: {detail}")]
    Dimension {
        op: &'static str,
        axis: &'static str,
        detail: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("degenerate statistics: {0}")]
    Degenerate(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("integrity error at byte offset {offset}: {detail}")]
    Integrity { offset: u64, detail: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("non-finite loss {loss} at step {step} (lr {lr:e}); recent losses {history:?}")]
    NonFinite {
        step: usize,
        lr: f64,
        loss: f64,
        history: Vec<f64>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Coarse failure classes, used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Dimension { .. } | Error::Config(_) | Error::Contract(_) => ErrorClass::Config,
            Error::Format(_) | Error::Integrity { .. } | Error::Data(_) | Error::Io(_) => {
                ErrorClass::Data
            }
            Error::Degenerate(_) | Error::NonFinite { .. } => ErrorClass::Numeric,
        }
    }

    pub(crate) fn dim(op: &'static str, axis: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            axis,
            detail: detail.into(),
        }
    }
}
