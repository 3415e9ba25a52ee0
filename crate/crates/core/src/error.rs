use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point ({0:.6}, {1:.6}, {2:.6}) is outside the grid")]
    OutsideGrid(f64, f64, f64),

    #[error("direction is not unit length (norm {0})")]
    NonUnitDirection(f64),

    #[error("pixel ({u}, {v}) outside image of size {width}x{height}")]
    PixelOutOfBounds {
        u: f64,
        v: f64,
        width: u32,
        height: u32,
    },

    #[error("invalid grid geometry: {0}")]
    InvalidGeometry(String),

    #[error("resolution {requested} exceeds configured maximum {max}")]
    ResolutionOverflow { requested: usize, max: usize },

    #[error("grid file: {0}")]
    GridFormat(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("non-finite loss at ray {ray}")]
    NonFiniteLoss { ray: usize },

    #[error("non-finite value in gradient check at parameter {0}")]
    NonFiniteCheck(usize),

    #[error("untrackable frame: no sampled ray intersects the map")]
    UntrackableFrame,

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("trajectory: {0}")]
    Trajectory(String),

    #[error("metric: {0}")]
    Metric(String),

    #[error("degenerate scene: {0}")]
    DegenerateScene(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
