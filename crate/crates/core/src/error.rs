use thiserror::Error;

/// Errors raised across the simulation, flow, and training pipeline.
#[derive(Debug, Error)]
pub enum SpeError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("integration blew up at t = {time} (non-finite state)")]
    BlowUp { time: f64 },

    #[error("sampling failed for index {index} after {retries} retries")]
    SamplingFailed { index: usize, retries: usize },

    #[error("non-finite value in flow layer {layer}")]
    NonFinite { layer: usize },

    #[error("non-finite gradient in parameter block `{block}`")]
    NonFiniteGradient { block: String },

    #[error("fit diverged at iteration {iter} (total loss {loss})")]
    Divergence {
        iter: usize,
        loss: f64,
        trace: Vec<crate::train::LossRecord>,
    },

    #[error("root finding did not converge: {0}")]
    RootFinding(String),

    #[error("empty sample set")]
    EmptySamples,

    #[error("malformed input at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SpeError>;
