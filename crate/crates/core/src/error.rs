use thiserror::Error;

/// Errors produced by the precoding, solver and learning routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("zero-norm precoder cannot be scaled to the power budget")]
    ZeroPrecoder,

    #[error("matrix inversion failed: {0}")]
    Singular(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("power multiplier search failed: {0}")]
    Bisection(String),

    #[error("null-space dimension unstable under resampling ({coarse} vs {fine}); increase num_group_samples")]
    UnstableDimension { coarse: usize, fine: usize },

    #[error("training diverged at epoch {epoch}: {reason}")]
    Diverged { epoch: usize, reason: String },

    #[error("missing WMMSE reference: {0}")]
    MissingReference(String),

    #[error("invalid format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
