use std::path::PathBuf;

/// Errors raised anywhere in the codec.
///
/// Variants line up with the CLI exit-code classes: contract and internal
/// failures are bugs, config/data/bitstream failures are user-facing.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid config at `{path}`: {msg}")]
    Config { path: String, msg: String },

    #[error("ingestion error: {0}")]
    Data(String),

    #[error("missing frame index {index} in {dir}")]
    MissingFrame { dir: PathBuf, index: usize },

    #[error("bitstream error: {0}")]
    Bitstream(String),

    #[error("checksum mismatch in {substream} substream (expected {expected:08x}, got {actual:08x})")]
    Checksum {
        substream: &'static str,
        expected: u32,
        actual: u32,
    },

    #[error("config hash mismatch: stream/checkpoint has {found:016x}, decoder has {expected:016x}")]
    HashMismatch { expected: u64, found: u64 },

    #[error("training diverged at stage {stage} step {step}: {detail}")]
    Diverged {
        stage: u32,
        step: usize,
        detail: String,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn contract<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Contract(msg.into()))
}
