use thiserror::Error;

pub type Result<T> = std::result::Result<T, GradError>;

#[derive(Debug, Error)]
pub enum GradError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },

    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("function is not deterministic: two evaluations gave {first} and {second}")]
    NonDeterministic { first: f64, second: f64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl GradError {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        GradError::Contract(msg.into())
    }

    pub(crate) fn domain(op: &'static str, detail: impl Into<String>) -> Self {
        GradError::Domain { op, detail: detail.into() }
    }
}
