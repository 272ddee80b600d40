use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("link is down")]
    LinkDown,

    #[error("task class `{0}` is already registered")]
    DuplicateClass(String),

    #[error("task class `{0}` is not registered")]
    UnknownClass(String),

    #[error("task class `{0}` has no profile record")]
    NotProfiled(String),

    #[error("task class `{0}` already has a profile record")]
    DuplicateRecord(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("task `{0}` is already queued")]
    DuplicateTask(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("instance too large: {size} tasks (limit {limit})")]
    InstanceTooLarge { size: usize, limit: usize },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("runs are not comparable: {0}")]
    IncomparableRuns(String),

    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
