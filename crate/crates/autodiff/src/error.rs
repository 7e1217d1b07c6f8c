use thiserror::Error;

pub type Result<T> = std::result::Result<T, AutodiffError>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("shape {shape:?} does not hold {len} values")]
    DataLength { shape: Vec<usize>, len: usize },

    #[error("non-finite value at index {index}")]
    NonFiniteData { index: usize },

    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: unsupported operand shape {shape:?}")]
    BadShape { op: &'static str, shape: Vec<usize> },

    #[error("{op} produced a non-finite value")]
    NonFiniteResult { op: &'static str },

    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("node {0} does not require a gradient")]
    NotDifferentiable(usize),

    #[error("node {0} does not belong to this graph")]
    UnknownNode(usize),
}
