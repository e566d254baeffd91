use thiserror::Error;

/// Crate-wide error type. Every fallible operation returns [`Result`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("batch has {got} rows, need at least {need}")]
    BatchTooSmall { got: usize, need: usize },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("labels must be exactly 0 or 1 (found {0})")]
    InvalidLabel(f64),

    #[error("scores must be finite and in (0, 1) (found {0})")]
    InvalidScore(f64),

    #[error("{context} contains a single class")]
    SingleClass { context: String },

    #[error("forward cache does not match: {0}")]
    StaleCache(String),

    #[error("client {index}: {source}")]
    Client {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("bad parameter container: {0}")]
    Format(String),

    #[error("bad data file {path}: {reason}")]
    DataFile { path: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
