use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid mesh: {0}")]
    InvalidMesh(String),

    #[error("invalid region: {0}")]
    InvalidRegion(String),

    #[error(
        "region average normal is degenerate (norm {norm:e}); supply an explicit region normal"
    )]
    DegenerateFrame { norm: f64 },

    #[error("degenerate triangle {0:?}")]
    DegenerateTriangle([usize; 3]),

    #[error("degenerate 6D rotation parameters: {0}")]
    DegenerateRotation(String),

    #[error("invalid material: {0}")]
    InvalidMaterial(String),

    #[error("inverted element: face {face} has det(J) = {det:e}")]
    InvertedElement { face: usize, det: f64 },

    #[error("linear solve failed: {0}")]
    Solve(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("no non-intersecting candidate transform found after {rounds} rounds ({tried} draws); try a larger parallel offset mean")]
    NoCandidates { rounds: usize, tried: usize },

    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
