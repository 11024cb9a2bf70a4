use std::path::PathBuf;
use thiserror::Error;

/// Errors surfaced by the library. Variants carry enough context to name the
/// offending file, class, or shape in diagnostics.
#[derive(Debug, Error)]
pub enum Error {
    #[error("missing class directory '{class}' under {root}")]
    MissingClassDir { class: String, root: PathBuf },

    #[error("failed to decode image {path}: {reason}")]
    ImageDecode { path: PathBuf, reason: String },

    #[error("image {path} has shape {got:?}, expected {expected:?}")]
    ImageShape {
        path: PathBuf,
        got: (usize, usize, usize),
        expected: (usize, usize, usize),
    },

    #[error("class '{class}' has {available} images, need at least {required}")]
    ClassTooSmall {
        class: String,
        available: usize,
        required: usize,
    },

    #[error("empty split '{split}' in manifest {path}")]
    EmptySplit { split: String, path: PathBuf },

    #[error("episode needs {requested} classes but split has only {available}")]
    NotEnoughClasses { requested: usize, available: usize },

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("no negatives available: contrastive attack needs a batch of at least 2")]
    NoNegatives,

    #[error("zero-norm latent vector: cosine similarity undefined")]
    ZeroNormLatent,

    #[error("zero-variance feature matrix: CKA undefined")]
    ZeroVariance,

    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
