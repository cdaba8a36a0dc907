use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("spatial size {size} is not a multiple of {multiple} (required by {levels} pooling levels)")]
    IndivisibleSpatial {
        size: usize,
        multiple: usize,
        levels: usize,
    },

    #[error("{path}: bad magic, expected {expected:?}")]
    BadMagic { path: PathBuf, expected: String },

    #[error("{path}: truncated payload ({actual} bytes, expected {expected})")]
    TruncatedPayload {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },

    #[error("{path}: payload has {actual} bytes but header declares {expected}")]
    PayloadMismatch {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },

    #[error("{path}: malformed header: {detail}")]
    Header { path: PathBuf, detail: String },

    #[error("{path}: label value {value} at voxel {index} is not a valid class")]
    InvalidLabel {
        path: PathBuf,
        value: u8,
        index: usize,
    },

    #[error("checkpoint layer names do not match model (missing: {missing:?}, extra: {extra:?})")]
    NameMismatch {
        missing: Vec<String>,
        extra: Vec<String>,
    },

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("unknown volume id {0:?}")]
    UnknownId(String),

    #[error("ids assigned to more than one role: {0:?}")]
    OverlappingRoles(Vec<String>),

    #[error("candidate {candidate:?} overlaps the evaluation set on {ids:?}")]
    EvalOverlap { candidate: String, ids: Vec<String> },

    #[error("invalid selection request: {0}")]
    Selection(String),

    #[error("missing patch at slice {slice}, origin ({row}, {col})")]
    MissingPatch { slice: usize, row: usize, col: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
