use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid model config: {0}")]
    Config(String),

    #[error("invalid ablation condition: {0}")]
    Condition(String),

    #[error("non-finite value detected in {location}")]
    NonFinite { location: String },

    #[error("zero-norm hidden state at layer {layer}, position {position}")]
    ZeroNorm { layer: usize, position: usize },

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("training diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f64 },

    #[error("analytic and numeric gradients disagree at {path} (relative error {rel_error:.3e})")]
    GradientMismatch { path: String, rel_error: f64 },

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. }
                | Error::ZeroNorm { .. }
                | Error::Diverged { .. }
                | Error::GradientMismatch { .. }
                | Error::UndefinedCorrelation(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
