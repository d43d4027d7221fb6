use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("timestep {t} out of range [1, {max}]")]
    Timestep { t: usize, max: usize },

    #[error("parameter out of range: {0}")]
    Range(String),

    #[error("unknown token {token:?}; not in the model vocabulary")]
    Vocabulary { token: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("checkpoint format version mismatch: file has {found:?}, this build reads {expected:?}")]
    CheckpointVersion { found: String, expected: String },

    #[error("checkpoint checksum mismatch for tensor {name:?}")]
    CheckpointChecksum { name: String },

    #[error("checkpoint is malformed: {0}")]
    CheckpointFormat(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable kind tag, used by the CLI's error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Shape(_) => "shape",
            Error::Timestep { .. } => "timestep",
            Error::Range(_) => "range",
            Error::Vocabulary { .. } => "vocabulary",
            Error::Dataset(_) => "dataset",
            Error::CheckpointVersion { .. } => "checkpoint_version",
            Error::CheckpointChecksum { .. } => "checkpoint_checksum",
            Error::CheckpointFormat(_) => "checkpoint_format",
            Error::Diverged(_) => "diverged",
            Error::Io(_) => "io",
            Error::Image(_) => "image",
            Error::Json(_) => "json",
        }
    }
}
