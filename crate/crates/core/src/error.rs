use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {node}: {details}")]
    ShapeMismatch { node: String, details: String },

    #[error("non-finite value produced by {node}")]
    NonFinite { node: String },

    #[error("invalid layout: {0}")]
    InvalidLayout(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("image index {index} outside embedding table of {table_len} rows")]
    IndexOutOfRange { index: usize, table_len: usize },

    #[error("missing difference score for frame pair ({i}, {j})")]
    MissingScore { i: usize, j: usize },

    #[error("sampling produced non-finite state at step {step}")]
    NonFiniteSample { step: usize },

    #[error("malformed {what}: {details}")]
    Malformed { what: String, details: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn malformed(what: impl Into<String>, details: impl Into<String>) -> Self {
        Error::Malformed { what: what.into(), details: details.into() }
    }
}
