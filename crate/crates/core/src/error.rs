use metaloss_autodiff::AutodiffError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("invalid arm model: {0}")]
    InvalidModel(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("mass matrix is not positive definite")]
    SingularMassMatrix,

    #[error("simulation diverged at step {step}")]
    Diverged { step: usize },

    #[error("run at {freq} Hz: {source}")]
    Run {
        freq: f64,
        #[source]
        source: Box<Error>,
    },

    #[error("frequency split: {0}")]
    Split(String),

    #[error("batch of {requested} records does not fit in any run (longest run has {longest})")]
    BatchTooLarge { requested: usize, longest: usize },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),

    #[error("diverged: {0}")]
    Divergence(String),

    #[error("meta-training diverged at epoch {epoch}, batch {batch}: {msg}")]
    MetaDiverged { epoch: usize, batch: usize, msg: String },

    #[error("adaptation diverged at step {step}: {msg}")]
    AdaptDiverged { step: usize, msg: String },

    #[error("unsupported loss variant for {op}: {variant}")]
    UnsupportedVariant { op: &'static str, variant: String },

    #[error(transparent)]
    Graph(#[from] AutodiffError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
