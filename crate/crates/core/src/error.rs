use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("integrity error in {path}: {msg}")]
    Integrity { path: PathBuf, msg: String },
    #[error("unsupported geometry: {0}")]
    UnsupportedGeometry(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("lung segmentation failed: {0}")]
    Segmentation(String),
    #[error("sensitivity undefined: no reference nodules")]
    NoNodules,
    #[error("missing input for stage `{stage}`: {what}; run `{run_first}` first")]
    MissingDependency {
        stage: String,
        what: String,
        run_first: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Nn(#[from] mipcad_nn::NnError),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn integrity(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Integrity {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// Process exit code: 2 for a missing upstream artifact, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::MissingDependency { .. } => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
