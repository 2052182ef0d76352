use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("expected 3 channels, got {0}")]
    ChannelCount(usize),

    #[error("value error: {0}")]
    Value(String),

    #[error("schedule error: {0}")]
    Schedule(String),

    #[error("sequence error: expected 4 parts, got {0}")]
    Sequence(usize),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("growth error: {0}")]
    Growth(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("need at least {needed} samples, got {got}")]
    SampleCount { needed: usize, got: usize },

    #[error("unpaired files: {}", .0.join(", "))]
    Pairing(Vec<String>),

    #[error("split error: {0}")]
    Split(String),

    #[error("non-finite loss at stage {stage}, epoch {epoch}, iteration {iteration}: {detail}")]
    NonFiniteLoss {
        stage: usize,
        epoch: usize,
        iteration: usize,
        detail: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
