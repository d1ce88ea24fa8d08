use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: expected {expected}, got {actual} ({what})")]
    Shape {
        what: &'static str,
        expected: String,
        actual: String,
    },

    #[error("infeasible configuration: {0}")]
    Infeasible(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error("trace error: {0}")]
    Trace(String),

    #[error(transparent)]
    Protocol(#[from] crate::wire::ProtocolError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn shape(
        what: &'static str,
        expected: impl std::fmt::Display,
        actual: impl std::fmt::Display,
    ) -> Self {
        Error::Shape {
            what,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
