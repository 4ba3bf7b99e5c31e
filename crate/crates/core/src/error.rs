use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand extents do not line up.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// A caller-side precondition was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A non-finite value was produced or consumed.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A parameter lies outside the domain of the function.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("incomplete patch grid: missing cell ({row}, {col})")]
    IncompleteGrid { row: usize, col: usize },

    #[error("calibration error: {0}")]
    Calibration(String),

    #[error("construction error at layer `{layer}`: {detail}")]
    Construction { layer: String, detail: String },

    /// Checkpoint is malformed or was written by an incompatible version.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training aborted: {0}")]
    NumericAbort(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }
}
