use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GradError {
    #[error("node {node}: shape mismatch ({detail})")]
    ShapeMismatch { node: usize, detail: String },

    #[error("node {node}: non-finite value produced")]
    NonFinite { node: usize },

    #[error("expected {expected} input tensors, got {got}")]
    InputCount { expected: usize, got: usize },

    #[error("backward called before forward")]
    NotEvaluated,

    #[error("backward requires a scalar output, node {node} has shape {shape:?}")]
    NonScalarOutput { node: usize, shape: Vec<usize> },

    #[error("tape is empty")]
    Empty,

    #[error("tensor data length {len} does not match shape {shape:?}")]
    BadTensor { shape: Vec<usize>, len: usize },
}
