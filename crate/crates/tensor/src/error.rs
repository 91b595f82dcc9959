use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{primitive}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        primitive: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{primitive}: expected {expected}, got shape {shape:?}")]
    BadShape {
        primitive: &'static str,
        expected: &'static str,
        shape: Vec<usize>,
    },
    #[error("{primitive}: axis {axis} out of range for shape {shape:?}")]
    InvalidAxis {
        primitive: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("{primitive}: expected {expected} inputs, got {got}")]
    Arity {
        primitive: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("shape {shape:?} has a zero extent")]
    InvalidShape { shape: Vec<usize> },
    #[error("shape {shape:?} needs {expected} elements, got {got}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("softmax-cross-entropy: label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("index {index} out of range for {numel} elements")]
    IndexOutOfRange { index: usize, numel: usize },
    #[error("expected a one-element value, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("value is not recorded on a tape")]
    NotOnTape,
    #[error("inputs are recorded on different tapes")]
    TapeMismatch,
}
