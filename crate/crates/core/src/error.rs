use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input domain: {0}")]
    Domain(String),
    #[error("shape: {0}")]
    Shape(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("incompatible file: {0}")]
    Incompatible(String),
    #[error("format: {0}")]
    Format(String),
    #[error(transparent)]
    Neural(#[from] failgen_neural::NeuralError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
