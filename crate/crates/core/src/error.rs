use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input shape: {0}")]
    Shape(String),
    #[error("payload size mismatch: frame holds {expected} bits per port, got {given}")]
    Capacity { expected: usize, given: usize },
    #[error("index {index} out of range (need {needed} samples, have {len})")]
    Bounds { index: usize, needed: usize, len: usize },
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("pilot value is zero at symbol {symbol}, subcarrier {subcarrier}")]
    DegeneratePilot { symbol: usize, subcarrier: usize },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Whether the failure came from reading or writing files.
    pub fn is_io(&self) -> bool {
        match self {
            Error::Io(_) => true,
            Error::Csv(c) => matches!(c.kind(), csv::ErrorKind::Io(_)),
            _ => false,
        }
    }
}
