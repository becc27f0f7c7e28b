use thiserror::Error;

/// Errors raised by tape operations.
#[derive(Debug, Error)]
pub enum TensorError {
    /// A named axis of one operand does not match what the op requires.
    #[error("{op}: axis `{axis}` mismatch (expected {expected}, got {got})")]
    DimMismatch {
        op: &'static str,
        axis: &'static str,
        expected: usize,
        got: usize,
    },

    /// Operand has the wrong rank for the op.
    #[error("{op}: expected rank {expected}, got shape {got:?}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        got: Vec<usize>,
    },

    /// Two operands must share a shape and do not.
    #[error("{op}: shape mismatch ({lhs:?} vs {rhs:?})")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Spatial extent is not divisible by the pooling window.
    #[error("{op}: extent {extent} along `{axis}` not divisible by {k}")]
    Indivisible {
        op: &'static str,
        axis: &'static str,
        extent: usize,
        k: usize,
    },

    /// `backward` was called on a non-scalar tensor.
    #[error("backward: loss must hold exactly one element, got {numel}")]
    NotScalar { numel: usize },

    /// Element data length disagrees with the shape product.
    #[error("leaf: {got} elements do not fill shape {shape:?} ({expected})")]
    BadElementCount {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },

    /// Miscellaneous contract violation (empty input, bad stride, ...).
    #[error("{op}: {msg}")]
    Contract { op: &'static str, msg: String },
}

impl TensorError {
    pub(crate) fn contract(op: &'static str, msg: impl Into<String>) -> Self {
        TensorError::Contract { op, msg: msg.into() }
    }
}

pub type Result<T> = std::result::Result<T, TensorError>;
