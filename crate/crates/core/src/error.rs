use thiserror::Error;

/// Errors raised anywhere in the estimation pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("budget set is not convex: {0}")]
    ConvexityViolation(String),

    #[error("domain error: {0}")]
    DomainError(String),

    #[error("singular system: {0}")]
    SingularSystem(String),

    #[error("average shrinkage matrix is not invertible: {0}")]
    NonInvertibleWbar(String),

    #[error("configuration error: {0}")]
    ConfigError(String),

    #[error("parse error at {file}:{line}: {message}")]
    ParseError {
        file: String,
        line: u64,
        message: String,
    },

    #[error("join error: {0}")]
    JoinError(String),

    #[error("grid error: {0}")]
    GridError(String),

    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    /// Process exit code for the command-line front end.
    ///
    /// 1 = configuration, 2 = data, 3 = numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::ConfigError(_) => 1,
            Error::ConvexityViolation(_)
            | Error::DomainError(_)
            | Error::ParseError { .. }
            | Error::JoinError(_)
            | Error::Io(_) => 2,
            Error::SingularSystem(_) | Error::NonInvertibleWbar(_) | Error::GridError(_) => 3,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
