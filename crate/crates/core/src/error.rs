//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid tensor shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("non-finite value in {label}")]
    NonFinite { label: String },

    #[error("{kind}: expected shape {expected:?}, got {got:?}")]
    ShapeMismatch {
        kind: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("shape mismatch at layer {layer} ({kind}): expected {expected:?}, got {got:?}")]
    LayerShape {
        layer: usize,
        kind: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("layer {layer} ({kind}) is not supported by {op}")]
    UnsupportedLayer {
        layer: usize,
        kind: &'static str,
        op: &'static str,
    },

    #[error("node {node} is not on the tape (len {len})")]
    NotOnTape { node: usize, len: usize },

    #[error("gradient root must be a scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },

    #[error("class index {class} out of range for {classes} classes")]
    InvalidClass { class: usize, classes: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("degenerate holdout set: {0}")]
    DegenerateHoldout(&'static str),

    #[error("optimization diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },

    #[error("model file error at byte offset {offset}: {reason}")]
    ModelFormat { offset: u64, reason: String },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("saliency map file error: {0}")]
    MapFormat(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("stage '{stage}' failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Wraps an error with the name of the pipeline stage it aborted.
    pub fn in_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// True for errors caused by an invalid configuration rather than a
    /// failure while running the pipeline. The CLI maps these to exit code 2.
    pub fn is_config(&self) -> bool {
        match self {
            Error::Config(_) => true,
            Error::Stage { source, .. } => source.is_config(),
            _ => false,
        }
    }
}
