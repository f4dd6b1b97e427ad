use std::path::PathBuf;

/// Errors produced by every stage of the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty-norm: norm of an empty vector")]
    EmptyNorm,

    #[error("k-exceeds-columns: asked for {k} of {len} columns")]
    KExceedsColumns { k: usize, len: usize },

    #[error("bad-scale: quantization step must be positive, got {0}")]
    BadScale(f64),

    #[error("nothing-to-perturb: layer `{0}` has no non-salient columns")]
    NothingToPerturb(String),

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },

    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),

    #[error("quantization source needs a QuantSpec")]
    MissingSpec,

    #[error("missing partition for eligible tensor `{0}`")]
    MissingPartition(String),

    #[error("training mode `{0}` injects noise but no noise plan was given")]
    MissingPlan(&'static str),

    #[error("token {token} is out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },

    #[error("sequence of length {len} exceeds context length {context}")]
    SequenceTooLong { len: usize, context: usize },

    #[error("empty batch")]
    EmptyBatch,

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("step {step} is past the schedule end {total}")]
    StepOutOfRange { step: usize, total: usize },

    #[error("unknown tensor `{0}`")]
    UnknownTensor(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("malformed archive: {0}")]
    Archive(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(expected: &[usize], got: &[usize]) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
