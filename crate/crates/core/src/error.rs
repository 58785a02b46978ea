use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("vector norm {norm:e} is at or below the normalization guard")]
    ZeroVector { norm: f64 },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("masked softmax called with every entry masked out")]
    AllMasked,

    #[error("empty input")]
    EmptyInput,

    #[error("input vector is not unit-norm (norm = {norm})")]
    NotNormalized { norm: f64 },

    #[error("bad batch structure: {0}")]
    BadBatchStructure(String),

    #[error("no positive pair available for anchor {anchor}")]
    NoPositive { anchor: usize },

    #[error("no negative available for anchor {anchor}")]
    NoNegative { anchor: usize },

    #[error("no proxy for class {class}")]
    MissingProxy { class: usize },

    #[error("no label embedding for class {class}")]
    MissingLabelEmbedding { class: usize },

    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),

    #[error("K = {k} outside the valid range [{min}, {max}]")]
    KOutOfRange { k: usize, min: usize, max: usize },

    #[error("sample {sample} has no selected class in its masked row")]
    DegenerateRow { sample: usize },

    #[error("direction vector norm {norm:e} below guard")]
    DegenerateDirection { norm: f64 },

    #[error("log argument {0} is not positive")]
    LogDomain(f64),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("sampler needs {needed} classes with at least two samples, found {available}")]
    InsufficientClasses { needed: usize, available: usize },

    #[error("class {label} has a single sample")]
    SingletonClass { label: usize },

    #[error("k = {k} is invalid for {n} samples")]
    KTooLarge { k: usize, n: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit status for the CLI: 3 for numerical failures, 2 for
    /// everything else (bad input or configuration).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFiniteLoss { .. }
            | Error::ZeroVector { .. }
            | Error::DegenerateDirection { .. }
            | Error::DegenerateRow { .. }
            | Error::AllMasked
            | Error::LogDomain(_) => 3,
            _ => 2,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
