use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("vector norm is too small for a direction to be defined")]
    ZeroVector,

    #[error("gradient buffer is empty")]
    EmptyBuffer,

    #[error("invalid thresholds: lambda_proj ({proj}) must not exceed lambda_accept ({accept}), both in [-1, 1]")]
    InvalidThresholds { proj: f64, accept: f64 },

    #[error("length mismatch: {what} has {found} entries, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("layer {index}: {source}")]
    Layer {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("accuracy matrix is incomplete: missing a[{task}][{after}]")]
    IncompleteMatrix { task: usize, after: usize },

    #[error("accuracy {value} at a[{task}][{after}] is outside [0, 1]")]
    AccuracyOutOfRange {
        task: usize,
        after: usize,
        value: f64,
    },

    #[error("bad configuration: {0}")]
    BadConfig(String),

    #[error("loss became non-finite at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("bad magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic { expected: u32, found: u32 },

    #[error("file truncated: expected {expected} bytes of payload, found {found}")]
    TruncatedFile { expected: usize, found: usize },

    #[error("dimensions overflow the addressable size")]
    DimOverflow,

    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),

    #[error("malformed csv: {0}")]
    Csv(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn in_layer(self, index: usize) -> Self {
        Error::Layer {
            index,
            source: Box::new(self),
        }
    }
}
