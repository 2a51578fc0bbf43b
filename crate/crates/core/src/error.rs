use thiserror::Error;

/// Errors produced by the library. Shape and domain violations are reported
/// eagerly instead of letting NaNs propagate through training.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("empty sector mask: no in-sector pixels")]
    EmptyMask,
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("png decode error: {0}")]
    PngDecode(#[from] png::DecodingError),
    #[error("png encode error: {0}")]
    PngEncode(#[from] png::EncodingError),
}

pub type Result<T> = std::result::Result<T, Error>;
