use std::path::PathBuf;
use thiserror::Error;

/// Error type shared by every module in the crate.
#[derive(Debug, Error)]
pub enum LilError {
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    /// Offsets are valid only for the checkpoint they were searched against.
    #[error("offset belongs to checkpoint {offset_ckpt} but the loaded generator is {generator_ckpt}")]
    CheckpointMismatch {
        offset_ckpt: String,
        generator_ckpt: String,
    },

    #[error("teacher '{teacher}' does not support kind '{kind}'")]
    UnsupportedKind { teacher: String, kind: String },

    #[error("external teacher timed out after {seconds} s waiting for {path}")]
    Timeout { seconds: f64, path: PathBuf },

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    /// Validation failures: bad ranges, non-binary masks, missing scene
    /// handles, and similar caller contract violations.
    #[error("{0}")]
    Invalid(String),
}

impl LilError {
    /// Stable category token for machine-readable error records.
    pub fn kind(&self) -> &'static str {
        match self {
            LilError::Io { .. } => "io",
            LilError::Image { .. } => "image",
            LilError::Format { .. } => "format",
            LilError::Config(_) => "config",
            LilError::Shape { .. } => "shape",
            LilError::CheckpointMismatch { .. } => "checkpoint_mismatch",
            LilError::UnsupportedKind { .. } => "unsupported_kind",
            LilError::Timeout { .. } => "timeout",
            LilError::Diverged { .. } => "diverged",
            LilError::Invalid(_) => "invalid",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LilError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        LilError::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, LilError>;
