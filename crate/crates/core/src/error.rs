use thiserror::Error;

#[derive(Debug, Error)]
pub enum TppError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("invalid sequence {seq_id}: {msg}")]
    Validation { seq_id: String, msg: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("numerical fault: {0}")]
    Numerical(String),

    #[error("training diverged at epoch {epoch}: {msg}")]
    Diverged { epoch: usize, msg: String },

    #[error("thinning exceeded {max_rejects} rejections (bounds tried: {bounds:?})")]
    TooManyRejections { max_rejects: usize, bounds: Vec<f64> },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T, E = TppError> = std::result::Result<T, E>;

impl TppError {
    /// Short stable identifier of the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            TppError::Io(_) => "io",
            TppError::Parse { .. } => "parse",
            TppError::Validation { .. } => "validation",
            TppError::InvalidArgument(_) => "invalid_argument",
            TppError::Shape(_) => "shape",
            TppError::Config(_) => "config",
            TppError::Numerical(_) => "numerical",
            TppError::Diverged { .. } => "diverged",
            TppError::TooManyRejections { .. } => "too_many_rejections",
            TppError::Serde(_) => "serde",
        }
    }
}
