//! Small dense neural-network toolkit: parameters with Adam state, a
//! batched LSTM cell, softmax helpers and a finite-difference checker.

pub mod gradcheck;
pub mod linalg;
pub mod lstm;
pub mod ops;
pub mod params;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("non-finite gradient in {param}[{index}]")]
    NonFiniteGradient { param: String, index: usize },
    #[error("parameters became non-finite")]
    NonFiniteParameter,
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
