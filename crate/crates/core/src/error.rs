use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimensions: {0}")]
    InvalidDimensions(String),

    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("glyph {0:?} is not in the alphabet A-Z, 0-9")]
    UnknownGlyph(char),

    #[error("text of {glyphs} glyphs does not fit a {height}x{width} segment")]
    TextTooLong { glyphs: usize, height: usize, width: usize },

    #[error("patch at ({top}, {left}) of size {height}x{width} exceeds a {image_h}x{image_w} image")]
    OutOfBounds {
        top: usize,
        left: usize,
        height: usize,
        width: usize,
        image_h: usize,
        image_w: usize,
    },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("single-class input: ROC needs both labels")]
    SingleClass,

    #[error("{stage} did not converge: {metric} = {value:.5} (threshold {threshold:.5})")]
    NonConvergence {
        stage: &'static str,
        metric: &'static str,
        value: f64,
        threshold: f64,
    },

    #[error("{0} has not been trained")]
    Untrained(&'static str),

    #[error("missing artifact {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("png decode: {0}")]
    PngDecode(#[from] png::DecodingError),

    #[error("png encode: {0}")]
    PngEncode(#[from] png::EncodingError),
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn shape(expected: impl std::fmt::Debug, found: impl std::fmt::Debug) -> Self {
        Error::ShapeMismatch {
            expected: format!("{expected:?}"),
            found: format!("{found:?}"),
        }
    }
}
