use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("class {class} is missing from the {side} batch")]
    MissingClass { class: usize, side: &'static str },

    #[error("label {label} is out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("probability row {row} sums to {sum}, expected 1")]
    InvalidProbabilities { row: usize, sum: f64 },

    #[error("undefined: {0}")]
    Undefined(&'static str),

    #[error("dataset has no labels")]
    Unlabeled,

    #[error("regression schedule has {slots} slots but {requested} classes were requested")]
    ScheduleSlots { slots: usize, requested: usize },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("stage order violation: {0}")]
    StageOrder(String),

    #[error("training diverged in {stage} at epoch {epoch}: loss is not finite")]
    Diverged { stage: &'static str, epoch: usize },

    #[error("head kind mismatch: expected {expected}, found {found}")]
    KindMismatch { expected: String, found: String },

    #[error("missing manifest at {}", .0.display())]
    MissingManifest(PathBuf),

    #[error("unsupported format version {found} (supported: {supported})")]
    FormatVersion { found: u32, supported: u32 },

    #[error("{what}: manifest declares {expected} values but file holds {found}")]
    CountMismatch {
        what: String,
        expected: usize,
        found: usize,
    },

    #[error("checkpoint hash mismatch in {}", .0.display())]
    HashMismatch(PathBuf),

    #[error("malformed manifest: {0}")]
    Manifest(String),

    #[error("I/O error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
