use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("loss must be a scalar, got a {rows}x{cols} tensor")]
    NonScalarLoss { rows: usize, cols: usize },

    #[error("target head {target} is outside the permitted head set")]
    TargetOutsideMask { target: usize },

    #[error("dream samples are never stored in the replay buffer")]
    DreamInBuffer,

    #[error("{0} is empty")]
    Empty(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parameter space exhausted: requested {requested} classes, {available} cells available")]
    Exhausted { requested: usize, available: usize },

    #[error("no available head: {0}")]
    NoAvailableHead(String),

    #[error("generator reconstruction loss {loss:.5} did not drop below ceiling {ceiling:.5}")]
    GeneratorUnusable { loss: f64, ceiling: f64 },

    #[error("label set contains a single class")]
    SingleClassLabels,

    #[error("no trajectory produced a stopping label")]
    NoLabeledTrajectories,

    #[error("frozen parameters changed: expected hash {expected}, found {found}")]
    FrozenViolation { expected: String, found: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("missing checkpoint: {}", .0.display())]
    MissingCheckpoint(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
