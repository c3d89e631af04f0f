use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: dimension error: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("batchnorm: degenerate batch, channel {channel} has {count} element(s) in train mode")]
    DegenerateBatch { channel: usize, count: usize },

    #[error("{op}: numeric guard: {detail}")]
    NumericGuard { op: &'static str, detail: String },

    #[error("backward: loss must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("diverged: non-finite value in {0}")]
    Diverged(String),

    #[error("tolerance error: {0}")]
    Tolerance(String),

    #[error("structural mismatch: {0}")]
    StructuralMismatch(String),

    #[error("attempt to update frozen parameter `{0}`")]
    FrozenViolation(String),

    #[error("configuration error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn mismatch(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
