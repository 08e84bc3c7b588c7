use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("concept dictionary has {available} usable entries but {needed} negatives are required (short by {})", needed - available)]
    DictionaryTooSmall { needed: usize, available: usize },

    #[error("duplicate dictionary entry {0:?} after normalization")]
    DuplicateConcept(String),

    #[error("invalid box {bbox:?} for image of size {w}x{h}")]
    InvalidBox { bbox: [f64; 4], w: usize, h: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("mixed data kinds in one batch: {0} and {1}")]
    MixedKinds(String, String),

    #[error("config error: {0}")]
    Config(String),

    #[error("unknown config key {0:?}")]
    UnknownConfigKey(String),

    #[error("checkpoint config mismatch in keys: {}", .0.join(", "))]
    ConfigMismatch(Vec<String>),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("corrupted checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("non-finite loss at step {step}: {report}")]
    NonFiniteLoss { step: usize, report: String },

    #[error("unknown image id {0:?}")]
    UnknownImage(String),

    #[error("i/o error on {path}: {err}")]
    Io { path: PathBuf, err: std::io::Error },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|err| Error::Io { path: path.into(), err })
    }
}
