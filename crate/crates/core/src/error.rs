use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("shape {shape:?} does not describe {len} values")]
    InvalidShape { shape: Vec<usize>, len: usize },

    #[error("{op}: value {value} at index {index} is outside the domain")]
    Domain {
        op: &'static str,
        index: usize,
        value: f64,
    },

    #[error("{op}: axis {axis} is invalid for shape {shape:?}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },

    #[error("{op}: cannot reduce over an empty axis")]
    EmptyAxis { op: &'static str },

    #[error("{op}: index {index} out of bounds for {len} elements")]
    IndexOutOfBounds {
        op: &'static str,
        index: usize,
        len: usize,
    },

    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite gradient for parameter `{0}`, step rejected")]
    NonFiniteGradient(String),

    #[error("invalid configuration: {field}: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("degenerate contrast batch: {0}")]
    DegenerateBatch(String),

    #[error("degenerate retain batch: {0}")]
    DegenerateRetainBatch(String),

    #[error("non-finite loss {value} at {context}")]
    Diverged { context: String, value: f64 },

    #[error("{0} is empty")]
    EmptySet(String),

    #[error("zero denominator in {0}")]
    ZeroDenominator(&'static str),

    #[error("report has no `{0}` baseline row")]
    MissingBaseline(String),

    #[error("missing artifact {0}")]
    MissingArtifact(PathBuf),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn parse(path: impl Into<String>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }
}
