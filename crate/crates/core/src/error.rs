use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error(
        "cannot align {from_h}x{from_w} to {to_h}x{to_w}: crop/pad only fixes off-by-rounding \
         mismatches of at most 2; fix the stage strides or input resolutions instead"
    )]
    Alignment {
        from_h: usize,
        from_w: usize,
        to_h: usize,
        to_w: usize,
    },

    #[error("expected a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("variable {0} is not recorded on this tape")]
    UnknownVar(usize),

    #[error("function value is not finite when perturbing index {index}")]
    NonFiniteProbe { index: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("invalid network spec: {0}")]
    InvalidSpec(String),

    #[error("invalid config field `{field}`: {message}")]
    InvalidConfig { field: String, message: String },

    #[error("bad magic number in {path}: expected {expected:#010x}, found {found:#010x}")]
    BadMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },

    #[error("truncated file {path}: {detail}")]
    Truncated { path: PathBuf, detail: String },

    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },

    #[error("CIFAR file {path} has length {len}, not a multiple of 3073")]
    CifarLength { path: PathBuf, len: u64 },

    #[error("data not found: {0}")]
    DataMissing(String),

    #[error("{op} needs even spatial dimensions, got {h}x{w}")]
    OddDimensions { op: &'static str, h: usize, w: usize },

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("empty record list")]
    EmptyRecords,

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint was written for network {found:016x}, config describes {expected:016x}")]
    SpecHashMismatch { expected: u64, found: u64 },

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

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            message: message.into(),
        }
    }
}
