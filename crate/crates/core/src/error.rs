use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    Parameter { name: &'static str, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid schedule: {0}")]
    Schedule(String),

    #[error("inconsistent state pair: {0}")]
    Inconsistency(String),

    #[error("problem too large: {0}")]
    Size(String),

    #[error("non-finite value: {0}")]
    Numeric(String),

    #[error("training diverged at step {step}: loss {loss}")]
    Divergence { step: u64, loss: f64 },

    #[error("sampler invariant violated: {0}")]
    SamplerInvariant(String),

    #[error("context head invoked during inference")]
    ContextHeadDuringInference,
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::Parameter {
            name,
            reason: reason.into(),
        }
    }
}
