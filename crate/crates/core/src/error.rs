use thiserror::Error;

pub type Result<T> = std::result::Result<T, MoeError>;

#[derive(Debug, Error)]
pub enum MoeError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("zero vector has no direction")]
    ZeroVector,

    #[error("SVD did not converge after {sweeps} sweeps (off-diagonal residual {residual:e})")]
    SvdNonConvergence { sweeps: usize, residual: f64 },

    #[error("expert {0} is not placed on any device")]
    UnplacedExpert(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed archive: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl MoeError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        MoeError::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        MoeError::ShapeMismatch(msg.into())
    }
}
