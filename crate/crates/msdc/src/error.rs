use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        context: String,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("non-finite value detected in {location}")]
    NonFinite { location: String },

    #[error("non-finite gradient for parameter `{param}`")]
    NonFiniteGradient { param: String },

    #[error("no labeled pixels (all ground-truth values are zero or masked out)")]
    NoValidPixels,

    #[error("pfm: bad magic (expected `Pf`)")]
    PfmBadMagic,

    #[error("pfm: malformed header: {0}")]
    PfmBadHeader(String),

    #[error("pfm: zero scale")]
    PfmZeroScale,

    #[error("pfm: truncated payload (expected {expected} bytes, got {actual})")]
    PfmTruncated { expected: usize, actual: usize },

    #[error("disparity png: expected single-channel 16-bit samples, got {0}")]
    PngNot16Bit(String),

    #[error("checkpoint: bad magic")]
    CheckpointBadMagic,

    #[error("checkpoint: unsupported version {0}")]
    CheckpointBadVersion(u32),

    #[error("checkpoint: truncated")]
    CheckpointTruncated,

    #[error("checkpoint: corrupt: {0}")]
    CheckpointCorrupt(String),

    #[error("config file line {line}: {message}")]
    ConfigParse { line: usize, message: String },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(context: impl Into<String>, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
