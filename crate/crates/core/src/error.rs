use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("loss evaluated to a non-finite value ({0})")]
    NonFiniteLoss(f64),
    #[error("integration produced a non-finite state at step {step}")]
    NonFiniteState { step: usize },
    #[error("alpha must lie in [0, 1], got {0}")]
    AlphaOutOfRange(f64),
    #[error("order estimation needs a problem with an analytic solution")]
    AnalyticRequired,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("tape was built in inference mode and cannot be differentiated")]
    InferenceTape,

    #[error("bad IDX magic number {found:#010x} (expected {expected:#010x})")]
    BadMagic { found: u32, expected: u32 },
    #[error("file is truncated: {0}")]
    TruncatedFile(String),
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("line {line}: expected {expected} fields, found {found}")]
    BadRowLength {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: label {value} outside 0..{n_classes}")]
    BadLabel {
        line: usize,
        value: String,
        n_classes: usize,
    },
    #[error("line {line}: non-finite or unparsable value {value:?}")]
    NonFiniteValue { line: usize, value: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
