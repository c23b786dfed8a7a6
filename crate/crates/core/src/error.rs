use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("index out of range in {op}: {detail}")]
    IndexOutOfRange { op: &'static str, detail: String },

    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("infeasible budget: {0}")]
    InfeasibleBudget(String),

    #[error("empty prunable set after filtering")]
    EmptyRegistry,

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
