use std::io;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("no gradient reached {0}")]
    MissingGradient(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("record rejected: |{value}| uV exceeds 100 uV at channel {channel}, sample {sample}")]
    AmplitudeViolation { channel: usize, sample: usize, value: f32 },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("training diverged at step {step}")]
    Divergence { step: usize },

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
