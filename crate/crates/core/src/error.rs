use thiserror::Error;

#[derive(Debug, Error)]
pub enum MuirError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, MuirError>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(MuirError::Shape(msg.into()))
}
