use thiserror::Error;

/// Errors raised by tensor operations and the layers built on them.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: data length {len} does not match shape {shape:?}")]
    DataLength {
        op: &'static str,
        shape: Vec<usize>,
        len: usize,
    },
    #[error("{op}: output would be empty for input {input:?} and kernel {kernel:?}")]
    ZeroSizedOutput {
        op: &'static str,
        input: Vec<usize>,
        kernel: Vec<usize>,
    },
    #[error("{op}: expected {expected} channels, got {got}")]
    ChannelMismatch {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{op}: {channels} channels not divisible by {divisor}")]
    IndivisibleChannels {
        op: &'static str,
        channels: usize,
        divisor: usize,
    },
    #[error("{op}: cannot broadcast {rhs:?} onto {lhs:?}")]
    Broadcast {
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
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("fft: {axis} extent {extent} is not a power of two")]
    NonPowerOfTwo { axis: &'static str, extent: usize },
    #[error("{op}: {axis} extent {extent} must be even for stride 2")]
    OddExtent {
        op: &'static str,
        axis: &'static str,
        extent: usize,
    },
    #[error("{op}: input {height}x{width} is smaller than the minimum {min}x{min}")]
    Undersized {
        op: &'static str,
        height: usize,
        width: usize,
        min: usize,
    },
    #[error("{op}: label {label} out of range for {classes} classes")]
    LabelOutOfRange {
        op: &'static str,
        label: usize,
        classes: usize,
    },
    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward: loss does not depend on any tensor that requires grad")]
    DetachedGraph,
    #[error("{op}: non-finite value at index {index}")]
    NonFinite { op: &'static str, index: usize },
    #[error("{0}")]
    Config(String),
    #[error("training diverged: loss {loss} at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize, loss: f64 },
    #[error("{0}: dataset is empty")]
    EmptyDataset(&'static str),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{path}: {message}")]
    Format { path: String, message: String },
    #[error("{path}: checksum mismatch (stored {stored:#018x}, computed {computed:#018x})")]
    Checksum {
        path: String,
        stored: u64,
        computed: u64,
    },
    #[error("{path}: checkpoint version {found} is not supported (this build reads version {supported}); re-save it with a matching build or retrain")]
    Version {
        path: String,
        found: u32,
        supported: u32,
    },
    #[error("{path}: file is truncated")]
    Truncated { path: String },
    #[error("checkpoint does not match the model configuration: {}", .0.join("; "))]
    ConfigMismatch(Vec<String>),
}

impl TensorError {
    pub fn io(path: &std::path::Path, err: std::io::Error) -> Self {
        TensorError::Io {
            path: path.display().to_string(),
            message: err.to_string(),
        }
    }

    pub fn format(path: &std::path::Path, message: impl Into<String>) -> Self {
        TensorError::Format {
            path: path.display().to_string(),
            message: message.into(),
        }
    }
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
