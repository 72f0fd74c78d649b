use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DanError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("capacity exceeded: {got} objects but at most {max} allowed")]
    Capacity { got: usize, max: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid model container: {0}")]
    Container(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("empty ground truth")]
    EmptyGroundTruth,

    #[error("sequence too short: {len} frames, need more than {need}")]
    SequenceTooShort { len: usize, need: usize },

    #[error("problem too large for exhaustive search: {rows}x{cols}")]
    TooLarge { rows: usize, cols: usize },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DanError>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(DanError::Shape(msg.into()))
}
