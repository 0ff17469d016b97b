use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("insufficient points: need more than {k} points, got {n}")]
    InsufficientPoints { n: usize, k: usize },
    #[error("degenerate neighbourhood at point {index}: k-th neighbour at zero distance")]
    DegenerateNeighborhood { index: usize },
    #[error("calibration error: {0}")]
    Calibration(String),
    #[error("row/col scan metadata required")]
    MetadataRequired,
    #[error("target of {target} points exceeds the {available} available")]
    TargetTooLarge { target: usize, available: usize },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("assignment error: {0}")]
    Assignment(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("no classifier has any supervised point")]
    ZeroSupervision,
    #[error("class {0} absent from training labels")]
    AbsentClass(usize),
    #[error("empty slice")]
    EmptySlice,
    #[error("scene spec yields {got} points, need at least {need}")]
    SpecTooSparse { got: usize, need: usize },
    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
