use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the registration engine and its I/O layer.
#[derive(Debug, Error)]
pub enum Error {
    #[error("data length {actual} does not match {channels}x{shape:?} = {expected}")]
    LengthMismatch {
        channels: usize,
        shape: [usize; 3],
        expected: usize,
        actual: usize,
    },
    #[error("channel mismatch: expected {expected}, got {actual}")]
    ChannelMismatch { expected: usize, actual: usize },
    #[error("spatial shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: [usize; 3], right: [usize; 3] },
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("kernel side must be odd, got {0}")]
    EvenKernel(usize),
    #[error("shape {shape:?} is not divisible by factor {factor}")]
    NotDivisible { shape: [usize; 3], factor: usize },
    #[error("patch at {origin:?} of size {size:?} exceeds volume {shape:?}")]
    PatchOutOfBounds {
        origin: [usize; 3],
        size: [usize; 3],
        shape: [usize; 3],
    },
    #[error("volume too small for differencing: {0:?}")]
    DegenerateVolume([usize; 3]),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("conv_head flow extraction requires a flow head")]
    MissingFlowHead,
    #[error("constant volume has no contrast to normalize")]
    ConstantVolume,
    #[error("label {label} is outside the vocabulary of {num_labels} labels")]
    LabelOutOfRange { label: u32, num_labels: u32 },
    #[error("non-finite loss at iteration {iteration}: {detail}")]
    NonFiniteLoss { iteration: usize, detail: String },
    #[error("dataset is empty")]
    EmptyDataset,

    #[error("bad NIfTI magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),
    #[error("unsupported NIfTI dimensionality: dim = {0:?}")]
    UnsupportedDim([i16; 8]),
    #[error("truncated file: need {needed} bytes, found {found}")]
    Truncated { needed: usize, found: usize },
    #[error("bad header: {0}")]
    BadHeader(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
