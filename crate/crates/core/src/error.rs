use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("empty stream")]
    EmptyStream,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("node id {id} out of range (node_count {node_count})")]
    NodeOutOfRange { id: u32, node_count: usize },

    /// Divergence during training or a non-finite input.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("bad checkpoint header")]
    BadCheckpointHeader,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("AUC undefined: scores need at least one positive and one negative label")]
    AucUndefined,

    #[error("empty inductive set")]
    EmptyInductiveSet,

    #[error("{0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures caused by numeric divergence rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite(_))
    }

    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Parse { .. } => "parse",
            Error::EmptyStream => "empty_stream",
            Error::Config(_) => "config",
            Error::Shape(_) => "shape",
            Error::NodeOutOfRange { .. } => "node_out_of_range",
            Error::NonFinite(_) => "non_finite",
            Error::BadCheckpointHeader | Error::Checkpoint(_) => "checkpoint",
            Error::AucUndefined => "auc_undefined",
            Error::EmptyInductiveSet => "empty_inductive_set",
            Error::Invalid(_) => "invalid",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
