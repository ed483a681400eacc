use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("batch_norm in train mode needs at least 2 rows, got {rows}")]
    BatchTooSmall { rows: usize },

    #[error("non-finite gradient for parameter `{name}` (step {step}): {detail}")]
    NonFiniteGradient { name: String, step: u64, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("backward needs a scalar output, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("unknown parameter or buffer `{0}`")]
    UnknownName(String),

    #[error("duplicate parameter or buffer name `{0}`")]
    DuplicateName(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = DiffError> = std::result::Result<T, E>;
