use thiserror::Error;

/// Errors produced by tensor operations, model assembly, dataset handling
/// and the training/evaluation harnesses.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: axis {axis} out of range for rank {rank}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },

    #[error("{op}: domain error: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("matmul: inner extents differ ({lhs} vs {rhs})")]
    InnerExtentMismatch { lhs: usize, rhs: usize },

    #[error("conv2d: kernel {kernel:?} larger than padded input {input:?}")]
    KernelTooLarge {
        kernel: Vec<usize>,
        input: Vec<usize>,
    },

    #[error("concat: channel/extent mismatch between {lhs:?} and {rhs:?}")]
    ConcatMismatch { lhs: Vec<usize>, rhs: Vec<usize> },

    #[error("backward: loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("sample {index} has a target-class label but no shift ground truth")]
    MissingShift { index: usize },

    #[error("precision-recall curve needs at least one positive and one negative label")]
    SingleClass,

    #[error("nine-crop protocol needs margin >= {needed} px per side, chip leaves {available}")]
    InsufficientMargin { needed: usize, available: usize },

    #[error("empty sample pool: {0}")]
    EmptyPool(String),

    #[error("non-finite value first appeared in {node}")]
    NonFinite { node: String },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
