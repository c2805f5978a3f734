use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    /// A non-finite value appeared inside the selective scan.
    #[error("non-finite value at scan step {step}: {context}")]
    NonFinite { step: usize, context: String },

    #[error("checkpoint format error for `{tensor}`: {reason}")]
    Format { tensor: String, reason: String },

    #[error("report rejected: {0}")]
    Schema(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn format(tensor: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format {
            tensor: tensor.into(),
            reason: reason.into(),
        }
    }
}
