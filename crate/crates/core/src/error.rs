use std::io;

use thiserror::Error;

/// Errors raised anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("parameter {0} has no gradient")]
    MissingGrad(String),

    #[error("duplicate parameter name {0}")]
    DuplicateParam(String),

    #[error("unknown parameter {0}")]
    UnknownParam(String),

    #[error("quaternion norm {0:e} is too close to zero")]
    DegenerateQuaternion(f64),

    #[error("empty cost matrix")]
    EmptyCostMatrix,

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("file truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("format version {found} is not supported (expected {expected})")]
    Version { expected: u32, found: u32 },

    #[error("non-finite loss term {term} on sample {sample}")]
    NonFiniteLoss { term: &'static str, sample: String },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("config parse error: {0}")]
    Toml(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}
