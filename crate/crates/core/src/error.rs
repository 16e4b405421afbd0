use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("zero-norm vector in cosine similarity")]
    ZeroNorm,

    #[error("zero-norm column at layer {layer}")]
    ZeroNormLayer { layer: usize },

    #[error("zero-norm masked embedding for occurrence {occurrence_id}")]
    ZeroNormOccurrence { occurrence_id: u64 },

    #[error("non-finite value in input")]
    NonFinite,

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("malformed dump: {0}")]
    Format(String),

    #[error("unsupported dump version {0}")]
    Version(u16),

    #[error("invalid split ratios: {0}")]
    BadRatio(String),

    #[error("no valid triplet: {0}")]
    NoValidTriplet(String),

    #[error("no valid pair: {0}")]
    NoValidPair(String),

    #[error("empty data: {0}")]
    EmptyData(String),

    #[error("baseline needs at least 4 layers, got {0}")]
    TooFewLayers(usize),

    #[error("invalid plant spec: {0}")]
    BadSpec(String),

    #[error("invalid mask: {0}")]
    InvalidMask(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    /// Stable class name used on the CLI's stderr line.
    pub fn class(&self) -> &'static str {
        match self {
            Error::ZeroNorm | Error::ZeroNormLayer { .. } | Error::ZeroNormOccurrence { .. } => {
                "ZeroNormError"
            }
            Error::NonFinite => "NonFiniteError",
            Error::LengthMismatch { .. } => "LengthMismatch",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::Format(_) => "FormatError",
            Error::Version(_) => "VersionError",
            Error::BadRatio(_) => "BadRatio",
            Error::NoValidTriplet(_) => "NoValidTriplet",
            Error::NoValidPair(_) => "NoValidPair",
            Error::EmptyData(_) => "EmptyData",
            Error::TooFewLayers(_) => "TooFewLayers",
            Error::BadSpec(_) => "BadSpec",
            Error::InvalidMask(_) => "InvalidMask",
            Error::Config(_) => "ConfigError",
            Error::Io { .. } => "IoError",
            Error::Json { .. } => "JsonError",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
