use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("incomplete scene at {path}: missing {missing}")]
    IncompleteScene { path: PathBuf, missing: String },

    #[error("too many references: {count} (at most 5 allowed)")]
    TooManyReferences { count: usize },

    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("shape too small: {height}x{width}")]
    ShapeTooSmall { height: usize, width: usize },

    #[error("bad timestep {t} (valid range 1..={max})")]
    BadTimestep { t: usize, max: usize },

    #[error("numerical divergence{}", step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    NumericalDivergence { step: Option<usize> },

    #[error("no injection targets matched the filter")]
    NoInjectionTargets,

    #[error("adapters already injected into this backend")]
    AlreadyInjected,

    #[error("empty region: mask selects no pixels")]
    EmptyRegion,

    #[error("region too small: bounding box {height}x{width}, need at least 11x11")]
    RegionTooSmall { height: usize, width: usize },

    #[error("scene has no ground truth")]
    NoGroundTruth,

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("backend error: {0}")]
    Backend(String),

    #[error("adapter/backend mismatch: {0}")]
    AdapterMismatch(String),

    #[error("all {0} candidates failed")]
    AllCandidatesFailed(usize),

    #[error("stage failed: {0}")]
    Stage(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error at {path}: {source}")]
    Codec {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
