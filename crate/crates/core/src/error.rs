use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("unknown primitive `{0}`")]
    UnknownPrimitive(String),

    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,

    #[error("variable does not belong to this tape")]
    ForeignVar,

    #[error("function is not differentiable at coordinate {0}")]
    Kink(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),

    #[error("non-finite loss {value} during {context}")]
    NonFiniteLoss { context: String, value: f64 },

    #[error("masks of `{0}` are locked: labels are not available to training")]
    LabelsLocked(String),

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("unsupported format version {found} (this build reads version {expected})")]
    Version { found: u32, expected: u32 },

    #[error("incomplete run directory: {0}")]
    IncompleteRun(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(detail: impl Into<String>) -> Self {
        Error::InvalidArgument(detail.into())
    }
}
