use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("integration failed at step {step}: {message}")]
    Integration { step: usize, message: String },

    #[error("rank deficient noise at step {step}: rank {rank}, expected {expected}")]
    RankDeficient { step: usize, rank: usize, expected: usize },

    #[error("estimation failed: {0}")]
    Estimation(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("{task}: {source}")]
    Task {
        task: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { context: context.into(), source }
    }

    pub fn in_task(self, task: &str) -> Self {
        Error::Task { task: task.to_string(), source: Box::new(self) }
    }

    /// True for errors caused by bad input or configuration rather than numerics.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::InvalidInput(_) | Error::Config { .. } | Error::Json(_) => true,
            Error::Task { source, .. } => source.is_validation(),
            _ => false,
        }
    }
}
