use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch, left is {left:?}, right is {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("{op}: non-finite value at flat index {index}")]
    NonFinite { op: &'static str, index: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}: wrong IDX magic number, expected {expected:#010x}, found {found:#010x}")]
    WrongMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },

    #[error("{path}: IDX length mismatch, expected {expected} bytes, found {found}")]
    LengthMismatch {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },

    #[error("label {label} at index {index} is out of range for {classes} classes")]
    LabelOutOfRange {
        index: usize,
        label: usize,
        classes: usize,
    },

    #[error("empty dataset: {0}")]
    EmptyDataset(&'static str),

    #[error("non-finite activation in layer {layer}")]
    NonFiniteActivation { layer: usize },

    #[error("non-finite loss while training task {task}, epoch {epoch}, batch {batch}")]
    NonFiniteLoss {
        task: usize,
        epoch: usize,
        batch: usize,
    },

    #[error("incomplete evaluation row {row}")]
    IncompleteRow { row: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
