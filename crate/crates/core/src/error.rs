use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("log of non-positive value {value} at index {index}")]
    NonPositiveLog { index: usize, value: f32 },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("invalid grid: {0}")]
    Grid(String),

    #[error("patch ({i}, {j}) is outside a {p}x{p} grid")]
    PatchOutOfGrid { i: usize, j: usize, p: usize },

    #[error("class {class} is not in 0..{classes}")]
    UnknownClass { class: usize, classes: usize },

    #[error("embedding dimension mismatch: meta-attribution has {meta}, head expects {head}")]
    EmbeddingDim { meta: usize, head: usize },

    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f32 },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("mode {mode} requires {requirement}")]
    MissingArtifact { mode: String, requirement: String },

    #[error("malformed tensor file {path}: {reason}")]
    TensorFormat { path: PathBuf, reason: String },

    #[error("checksum mismatch for {path}: manifest {expected}, file {actual}")]
    Checksum {
        path: PathBuf,
        expected: String,
        actual: String,
    },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error at {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| Error::Io { path, source }
    }

    pub(crate) fn json(path: impl Into<PathBuf>) -> impl FnOnce(serde_json::Error) -> Self {
        let path = path.into();
        move |source| Error::Json { path, source }
    }
}
