use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the engine.
#[derive(Debug, Error)]
pub enum Error {
    /// Weight container could not be turned into a model.
    #[error("load error: {0}")]
    Load(String),

    /// A required weight is absent from the container.
    #[error("load error: missing weight `{0}`")]
    MissingWeight(String),

    /// A weight exists but its shape disagrees with the config.
    #[error("load error: weight `{key}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        key: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    /// Caller supplied an argument that violates an operation's precondition.
    #[error("argument error: {0}")]
    Argument(String),

    /// Inputs were combined in a way the API forbids (for example stale activations).
    #[error("usage error: {0}")]
    Usage(String),

    #[error("optimizer error: {0}")]
    Optimizer(String),

    /// Dataset, manifest or text bank content is inconsistent.
    #[error("data error: {0}")]
    Data(String),

    #[error("parse error in {path}:{line}:{column}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn arg<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Argument(msg.into()))
}
