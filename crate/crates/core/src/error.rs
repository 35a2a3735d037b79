use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("control kind mismatch: expected {expected}, got {got}")]
    KindMismatch { expected: String, got: String },

    #[error("probe/feature tap mismatch: {0}")]
    TapMismatch(String),

    #[error("unknown class label {label} (num_classes = {num_classes})")]
    UnknownLabel { label: usize, num_classes: usize },

    #[error("dataset error at record {record}: {message}")]
    Dataset { record: usize, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
