use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or layer shapes do not line up.
    #[error("shape error at layer {layer}: {message}")]
    Shape { layer: usize, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    /// An API was called with structurally incompatible arguments.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("protocol error for client {client}, task {task}: {message}")]
    Protocol {
        client: usize,
        task: usize,
        message: String,
    },

    #[error("aggregation error: {0}")]
    Aggregation(String),

    #[error("partition error: {0}")]
    Partition(String),

    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(layer: usize, message: impl Into<String>) -> Self {
        Error::Shape {
            layer,
            message: message.into(),
        }
    }
}
