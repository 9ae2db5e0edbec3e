use thiserror::Error;
use viconex_autodiff::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("text embeddings: {0}")]
    TextBank(String),
    #[error("variant {variant} {msg}")]
    Variant { variant: &'static str, msg: String },
    #[error("invalid input: {0}")]
    Input(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;
