use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CrhError {
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("alignment undefined: {0} has zero centered norm")]
    UndefinedAlignment(&'static str),

    #[error("insufficient data: {retained} usable pairs, need at least {required}")]
    InsufficientData { retained: usize, required: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite activations at layer {layer}")]
    NonFiniteActivation { layer: usize },

    #[error("non-finite parameter update at layer {layer}")]
    NonFiniteUpdate { layer: usize },

    #[error("invalid class index {index} for {classes} classes")]
    InvalidClass { index: usize, classes: usize },

    #[error("moment mode mismatch: {0:?} vs {1:?}")]
    ModeMismatch(crate::probes::MomentMode, crate::probes::MomentMode),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("construction failed after {attempts} attempts: {reason}")]
    ConstructionFailed { attempts: usize, reason: String },
}

pub type Result<T, E = CrhError> = std::result::Result<T, E>;
