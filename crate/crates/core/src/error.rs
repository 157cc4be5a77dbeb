use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("resolution error: volume {shape:?} is not divisible by patch size {patch}; attach a resolution re-embedding for this input size")]
    Resolution { shape: Vec<usize>, patch: usize },

    #[error("composition error: {0}")]
    Composition(String),

    #[error("unknown weight {name:?}; valid names: {valid:?}")]
    UnknownWeight { name: String, valid: Vec<String> },

    #[error("no adapter composition registered for {key}; registered keys: {registered:?}")]
    Routing {
        key: String,
        registered: Vec<String>,
    },

    #[error("routing key {0} is already registered")]
    Conflict(String),

    #[error("ownership violation: {0}")]
    Ownership(String),

    #[error("training failed: {reason} (final accuracy {accuracy:.4})")]
    TrainingFailure { reason: String, accuracy: f64 },

    #[error("training diverged at epoch {epoch}: {reason}")]
    Divergence { epoch: usize, reason: String },

    #[error("degenerate cohort: {0}")]
    DegenerateCohort(String),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("format error at byte offset {offset}: {reason}")]
    Format { offset: u64, reason: String },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("base model mismatch: artifact was trained against {expected}, found {found}")]
    HashMismatch { expected: String, found: String },

    #[error("forgetting audit failed after step {step}: {detail}")]
    AuditFailure { step: usize, detail: String },

    #[error("audit configuration error: {0}")]
    AuditConfig(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
