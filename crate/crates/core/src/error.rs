use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: {dim} mismatch (expected {expected}, got {got})")]
    ShapeMismatch {
        op: &'static str,
        dim: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid tensor shape {0:?}")]
    InvalidShape(Vec<usize>),

    #[error("{op}: scale must be positive, got {value}")]
    NonPositiveScale { op: &'static str, value: f32 },

    #[error("unsupported bit-width {0}")]
    BitWidth(u32),

    #[error("degenerate range: all values equal {0}")]
    DegenerateRange(f32),

    #[error("activation quantizer range is not frozen")]
    Unfrozen,

    #[error("batchnorm channel {channel} has negative variance {value}")]
    NegativeVariance { channel: usize, value: f32 },

    #[error("backward requires a scalar loss, got {0} elements")]
    NonScalarLoss(usize),

    #[error("block {0} is already fused")]
    AlreadyFused(String),

    #[error("block {0} is not fused")]
    NotFused(String),

    #[error("block {block}: {what}")]
    MissingBatchNorm { block: String, what: &'static str },

    #[error("invalid model graph: {0}")]
    Graph(String),

    #[error("{0} is empty")]
    Empty(&'static str),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("training diverged at step {step} (recent losses {recent:?})")]
    Diverged { step: usize, recent: Vec<f32> },

    #[error("target storage: {0}")]
    Storage(String),
}
