use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid tensor construction: {0}")]
    InvalidTensor(String),

    #[error("coordinate {0} out of bounds")]
    OutOfBounds(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid filter geometry: {0}")]
    InvalidGeometry(String),

    #[error("invalid network spec: {0}")]
    InvalidSpec(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("training aborted: {0}")]
    Training(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
