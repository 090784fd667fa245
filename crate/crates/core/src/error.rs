use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("degenerate warp: {0}")]
    DegenerateWarp(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("data format error: {0}")]
    Format(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("internal invariant violated: {0}")]
    Internal(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable machine-readable code used as the CLI error prefix.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "E_USAGE",
            Error::DegenerateWarp(_) => "E_DATA",
            Error::NotFound(_) => "E_NOT_FOUND",
            Error::Format(_) => "E_DATA",
            Error::Numeric(_) => "E_NUMERIC",
            Error::Internal(_) => "E_INTERNAL",
            Error::Io(_) => "E_IO",
        }
    }

    /// Process exit code: 2 usage, 3 not-found, 4 data/format, 5 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) => 2,
            Error::NotFound(_) => 3,
            Error::DegenerateWarp(_) | Error::Format(_) | Error::Io(_) | Error::Internal(_) => 4,
            Error::Numeric(_) => 5,
        }
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Format(e.to_string())
    }
}

impl From<toml::de::Error> for Error {
    fn from(e: toml::de::Error) -> Self {
        Error::InvalidArgument(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
