use thiserror::Error;

pub type Result<T> = std::result::Result<T, AdError>;

#[derive(Debug, Error)]
pub enum AdError {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    DimMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: invalid shape {shape:?}: {reason}")]
    ShapeError {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    #[error("conv2d: unsupported kernel size {k} (must be odd)")]
    UnsupportedKernel { k: usize },

    #[error("zero_pad: centered alignment on axis {axis} needs an even gap, got {src_extent} -> {target}")]
    AlignmentError {
        axis: usize,
        src_extent: usize,
        target: usize,
    },

    #[error("slice_view: window {offset}+{len} out of bounds on axis {axis} (extent {extent})")]
    RangeError {
        axis: usize,
        offset: usize,
        len: usize,
        extent: usize,
    },

    #[error("axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { axis: usize, rank: usize },

    #[error("cross_entropy: label {label} >= class count {classes}")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("backward on a consumed tape; re-record the forward pass first")]
    StaleTape,

    #[error("backward: loss must be a scalar, got {numel} elements")]
    NotScalar { numel: usize },

    #[error("optimizer: parameter {name:?} has no adjoint; run backward first")]
    MissingAdjoint { name: String },

    #[error("grad_check: epsilon {eps} outside [1e-7, 1e-3]")]
    BadEpsilon { eps: f64 },

    #[error("non-finite value encountered in {what}")]
    NonFinite { what: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}
