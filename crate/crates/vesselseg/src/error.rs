use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed header in {path}: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },

    #[error("raw data size mismatch in {path}: header declares {expected} bytes, file has {actual}")]
    RawSizeMismatch {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },

    #[error("invalid volume: {0}")]
    InvalidVolume(String),

    #[error("label volume contains non-binary value {0}")]
    NonBinaryLabel(f32),

    #[error("operation requires an intensity volume, got a label volume")]
    LabelNotSupported,

    #[error("zero-variance volume cannot be normalized")]
    DegenerateNormalization,

    #[error("invalid resample factor {0}: must lie in (0, 1]")]
    InvalidResampleFactor(f64),

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("empty frame sequence")]
    EmptyFrames,

    #[error("invalid rigid pose: {0}")]
    InvalidPose(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("checksum mismatch in parameter file {path}")]
    ChecksumMismatch { path: PathBuf },

    #[error("parameter file {path} does not match config: {reason}")]
    ParamMismatch { path: PathBuf, reason: String },

    #[error("empty dataset: manifest lists no training volumes")]
    EmptyDataset,

    #[error("phantom generation failed: {0}")]
    PhantomGeneration(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
