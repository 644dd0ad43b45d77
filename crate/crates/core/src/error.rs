use std::path::PathBuf;

use thiserror::Error;

use crate::grid::Backend;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid point: {0}")]
    InvalidPoint(String),

    #[error("timestamps out of order: {later} < {earlier}")]
    TimeOrder { earlier: f64, later: f64 },

    #[error("empty trajectory")]
    EmptyTrajectory,

    #[error("point ({lat}, {lon}) lies outside the grid bounding box")]
    OutOfDomain { lat: f64, lon: f64 },

    #[error("resolution {resolution} outside supported range [{min}, {max}]")]
    ResolutionOutOfRange { resolution: u8, min: u8, max: u8 },

    #[error("cell is already at maximum resolution {0}")]
    AtMaxResolution(u8),

    #[error("cell at resolution 0 has no parent")]
    NoParent,

    #[error("backend mismatch: {0:?} vs {1:?}")]
    BackendMismatch(Backend, Backend),

    #[error("backend {0:?} is not available in this build")]
    BackendUnavailable(Backend),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unsupported file version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("malformed file: {0}")]
    Malformed(String),

    #[error("checksum mismatch: stored {stored}, computed {computed}")]
    Checksum { stored: String, computed: String },

    #[error("empty mask set")]
    EmptyMask,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenOutOfRange { id: u32, size: usize },

    #[error("non-finite loss at step {step}: J={loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("insufficient data: need {needed}, have {available}")]
    InsufficientData { needed: usize, available: usize },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("config parse: {0}")]
    Toml(#[from] toml::de::Error),

    #[error("config serialize: {0}")]
    TomlSer(#[from] toml::ser::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn stage(stage: &str, source: Error) -> Self {
        Error::Stage {
            stage: stage.to_string(),
            source: Box::new(source),
        }
    }
}
