use std::path::PathBuf;

use crate::engine::Shape;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch, expected {expected} but got {found}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        found: String,
    },

    #[error("{op}: invalid argument: {reason}")]
    InvalidArgument { op: &'static str, reason: String },

    #[error("backprop: node {node} ({op}) has no retained activation and no reconstruction")]
    MissingActivation { node: usize, op: &'static str },

    #[error("backprop: loss must be a scalar, got shape {0}")]
    NonScalarLoss(Shape),

    #[error("backprop: variable was not recorded on this tape")]
    Untracked,

    #[error("architecture spec: field `{field}`: {reason}")]
    Spec { field: &'static str, reason: String },

    #[error("config: {0}")]
    Config(String),

    #[error("tensor file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, expected: impl ToString, found: impl ToString) -> Self {
        Error::ShapeMismatch {
            op,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    pub(crate) fn invalid(op: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            reason: reason.into(),
        }
    }
}
