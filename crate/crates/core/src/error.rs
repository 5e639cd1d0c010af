use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    #[error("{op}: input too short for kernel/stride (length {length}, kernel {kernel}, stride {stride}, padding {padding})")]
    InputTooShort {
        op: &'static str,
        length: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },

    #[error("{op}: window {window} exceeds length {length}")]
    WindowTooLarge {
        op: &'static str,
        window: usize,
        length: usize,
    },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("backward already ran from this node; call zero_grad before reusing the graph")]
    AlreadyBackpropagated,

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("empty binary")]
    EmptyBinary,

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("resample geometry mismatch: {0}")]
    Geometry(String),

    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("model file: {0}")]
    Format(String),

    #[error("manifest {path}:{line}: {reason}")]
    Manifest {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("unknown layer tag {0:?}")]
    UnknownLayer(String),

    #[error("snippet contains negative value {0}")]
    NegativeValue(f64),

    #[error("nothing to evade: sample is not classified malicious (p={0})")]
    NothingToEvade(f64),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

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
