use thiserror::Error;

pub type ServiceResult<T> = Result<T, ServiceError>;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("unknown database `{name}` (available: {})", available.join(", "))]
    UnknownDatabase { name: String, available: Vec<String> },

    #[error("unknown session {0}")]
    UnknownSession(u64),

    #[error("{0}")]
    Invalid(String),

    #[error(transparent)]
    Core(#[from] racon_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
