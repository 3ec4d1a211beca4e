use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("malformed octree: {0}")]
    Structure(String),
    #[error("table construction failed: {0}")]
    Table(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("degenerate geometry: {0}")]
    Degenerate(String),
    #[error("mesh index out of range: {0}")]
    IndexOutOfRange(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("optimization aborted: {0}")]
    Aborted(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
