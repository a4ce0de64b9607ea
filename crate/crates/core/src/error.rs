use std::path::PathBuf;

use thiserror::Error;

use crate::train::Checkpoint;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse error classes, mirrored by the CLI exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Data,
    Integrity,
    Other,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unknown key `{key}` in section [{section}]")]
    UnknownKey { section: String, key: String },

    #[error("shape error: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("failed to decode {path}: {reason}")]
    Decode { path: PathBuf, reason: String },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("missing files: {}", display_paths(.0))]
    MissingFiles(Vec<PathBuf>),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("non-finite loss in stage `{stage}` at epoch {epoch}; last good checkpoint kept")]
    Diverged {
        stage: String,
        epoch: usize,
        last_good: Box<Checkpoint>,
    },

    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

fn display_paths(paths: &[PathBuf]) -> String {
    paths
        .iter()
        .map(|p| p.display().to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Validation(_)
            | Error::Config(_)
            | Error::UnknownKey { .. }
            | Error::Shape { .. } => ErrorKind::Validation,
            Error::Decode { .. }
            | Error::EmptyInput(_)
            | Error::MissingFiles(_)
            | Error::Io { .. }
            | Error::Csv(_)
            | Error::Image(_)
            | Error::UndefinedMetric(_) => ErrorKind::Data,
            Error::Integrity(_) | Error::Diverged { .. } => ErrorKind::Integrity,
            Error::Tensor(_) | Error::Json(_) => ErrorKind::Other,
        }
    }
}
