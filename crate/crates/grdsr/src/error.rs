use thiserror::Error;

/// Error type shared by every module in the crate.
///
/// The variants mirror how failures are reported at the process boundary:
/// configuration and domain errors are caller mistakes, data and format
/// errors come from inputs on disk, numerical failures are detected
/// mid-computation (non-finite values, diverging solvers).
#[derive(Debug, Error)]
pub enum GrdError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl GrdError {
    pub fn config(msg: impl Into<String>) -> Self {
        GrdError::Config(msg.into())
    }

    pub fn domain(msg: impl Into<String>) -> Self {
        GrdError::Domain(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        GrdError::Data(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        GrdError::Format(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        GrdError::Numerical(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, GrdError>;
