use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("softmax row {row} has no finite entry")]
    DegenerateAxis { row: usize },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("loss is detached from every differentiable input")]
    DetachedLoss,
    #[error("non-finite function value at finite-difference probe (coordinate {coord})")]
    NonFiniteProbe { coord: usize },
    #[error("attention mask selects no source position")]
    EmptyContent,
    #[error("sequence of {len} tokens exceeds the maximum of {max}")]
    Overlength { len: usize, max: usize },
    #[error("token id {id} outside vocabulary of {vocab} entries")]
    UnknownId { id: usize, vocab: usize },
    #[error("unknown label {0:?}")]
    UnknownLabel(String),
    #[error("instance too large for enumeration: {labels}^{len} sequences")]
    TooLarge { labels: usize, len: usize },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("config/checkpoint mismatch: {0}")]
    Mismatch(String),
    #[error("malformed config: {0}")]
    Config(String),
    #[error("missing file: {0}")]
    MissingFile(String),
    #[error("gradient check failed: {0}")]
    GradientCheck(String),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    /// Short machine-readable tag used by the command-line error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::NonFinite { .. } => "non_finite",
            Error::DegenerateAxis { .. } => "degenerate_axis",
            Error::NonScalarLoss(_) => "non_scalar_loss",
            Error::DetachedLoss => "detached_loss",
            Error::NonFiniteProbe { .. } => "non_finite_probe",
            Error::EmptyContent => "empty_content",
            Error::Overlength { .. } => "overlength",
            Error::UnknownId { .. } => "unknown_id",
            Error::UnknownLabel(_) => "unknown_label",
            Error::TooLarge { .. } => "too_large",
            Error::Empty(_) => "empty",
            Error::Parse { .. } => "parse",
            Error::Invalid(_) => "invalid",
            Error::Mismatch(_) => "mismatch",
            Error::Config(_) => "config",
            Error::MissingFile(_) => "missing_file",
            Error::GradientCheck(_) => "gradient_check",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
