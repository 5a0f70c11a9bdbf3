use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {what}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        what: &'static str,
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("invalid box [{0}, {1}, {2}, {3}]: need finite x0 < x1 and y0 < y1")]
    InvalidBox(f64, f64, f64, f64),

    #[error("mask has no set pixels")]
    EmptyMask,

    #[error("center ({x}, {y}) lies outside the {cols}x{rows} grid")]
    OutsideGrid { x: f64, y: f64, rows: usize, cols: usize },

    #[error("invalid {name}: {reason}")]
    InvalidArgument { name: &'static str, reason: String },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("task {task:?} cannot decode {input}")]
    TaskMismatch { task: crate::grid::TaskKind, input: &'static str },

    #[error("stale gradient cache: {0}")]
    StaleCache(&'static str),

    #[error("training diverged at step {step}: loss is {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("could not place {wanted} objects in image {image} after {attempts} attempts")]
    Placement {
        image: u64,
        wanted: usize,
        attempts: usize,
    },

    #[error("annotation record {index}: {reason}")]
    Annotation { index: usize, reason: String },

    #[error("bad file format: {0}")]
    Format(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            name,
            reason: reason.into(),
        }
    }
}
