use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("payload holds {actual} values but the header implies {expected}")]
    SizeMismatch { expected: usize, actual: usize },

    #[error("dimension mismatch: {left:?} vs {right:?}")]
    DimsMismatch { left: [usize; 3], right: [usize; 3] },

    #[error("invalid {kind} value {value} at voxel {index}")]
    InvalidValue {
        kind: &'static str,
        value: f64,
        index: usize,
    },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: malformed header: {message}")]
    Header { path: PathBuf, message: String },

    #[error("mask is empty")]
    EmptyMask,

    #[error("point {point:?} lies outside a volume of dims {dims:?}")]
    OutOfBounds { point: [f64; 3], dims: [usize; 3] },

    #[error("background seeds are empty: dilation radius {radius} covers the whole crop")]
    EmptyBackground { radius: usize },

    #[error("foreground and background seeds overlap at {count} voxels")]
    SeedOverlap { count: usize },

    #[error("seed set has no {0} voxels")]
    EmptySeedClass(&'static str),

    #[error("conjugate gradient did not converge: relative residual {residual:e} after {iterations} iterations")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("timed out after {0:?} waiting for the external predictor")]
    Timeout(std::time::Duration),

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

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
