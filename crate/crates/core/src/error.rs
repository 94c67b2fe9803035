use std::fmt;
use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// Two operands whose shapes cannot be combined by `op`.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A single operand with a shape the operation cannot accept.
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    InvalidAxis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    EmptyAxis {
        op: &'static str,
        axis: usize,
    },
    NonPositiveLog {
        index: usize,
        value: f64,
    },
    NotScalar {
        shape: Vec<usize>,
    },
    NotOnTape {
        id: usize,
    },
    NonFinite {
        what: String,
    },
    InvalidArgument(String),
    /// Every violated configuration rule, one entry each.
    Config(Vec<String>),
    LabelOutOfRange {
        label: usize,
        classes: usize,
    },
    Diverged {
        epoch: usize,
        batch: usize,
        loss: f64,
    },
    Dataset(String),
    Decode {
        path: PathBuf,
        reason: String,
    },
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    Checkpoint(CheckpointError),
    Json(serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CheckpointError {
    BadMagic([u8; 4]),
    VersionMismatch { found: u32, expected: u32 },
    UnexpectedEnd { tensor: Option<String> },
    DimensionOverflow { tensor: String },
    InvalidName,
    MissingTensor(String),
    TensorShape {
        tensor: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::BadMagic(found) => write!(f, "bad magic: {found:?}"),
            Self::VersionMismatch { found, expected } => {
                write!(f, "version mismatch: found {found}, expected {expected}")
            }
            Self::UnexpectedEnd { tensor: Some(name) } => {
                write!(f, "unexpected end of data in tensor '{name}'")
            }
            Self::UnexpectedEnd { tensor: None } => write!(f, "unexpected end of data in header"),
            Self::DimensionOverflow { tensor } => {
                write!(f, "dimension overflow in tensor '{tensor}'")
            }
            Self::InvalidName => write!(f, "tensor name is not valid UTF-8"),
            Self::MissingTensor(name) => write!(f, "missing tensor '{name}'"),
            Self::TensorShape {
                tensor,
                expected,
                found,
            } => write!(
                f,
                "tensor '{tensor}' has shape {found:?}, model expects {expected:?}"
            ),
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch between {lhs:?} and {rhs:?}")
            }
            Self::InvalidShape { op, shape, reason } => {
                write!(f, "{op}: invalid shape {shape:?}: {reason}")
            }
            Self::InvalidAxis { op, axis, rank } => {
                write!(f, "{op}: axis {axis} out of range for rank {rank}")
            }
            Self::EmptyAxis { op, axis } => write!(f, "{op}: axis {axis} is empty"),
            Self::NonPositiveLog { index, value } => {
                write!(f, "log of non-positive value {value} at index {index}")
            }
            Self::NotScalar { shape } => write!(f, "loss must be a scalar, got shape {shape:?}"),
            Self::NotOnTape { id } => write!(f, "value {id} is not on this tape"),
            Self::NonFinite { what } => write!(f, "non-finite value in {what}"),
            Self::InvalidArgument(msg) => f.write_str(msg),
            Self::Config(violations) => {
                write!(f, "invalid configuration: {}", violations.join("; "))
            }
            Self::LabelOutOfRange { label, classes } => {
                write!(f, "label {label} out of range for {classes} classes")
            }
            Self::Diverged { epoch, batch, loss } => {
                write!(f, "loss diverged to {loss} at epoch {epoch}, batch {batch}")
            }
            Self::Dataset(msg) => write!(f, "dataset: {msg}"),
            Self::Decode { path, reason } => {
                write!(f, "cannot decode {}: {reason}", path.display())
            }
            Self::Io { path, source } => write!(f, "{}: {source}", path.display()),
            Self::Checkpoint(e) => write!(f, "checkpoint: {e}"),
            Self::Json(e) => write!(f, "json: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Self::Io { source, .. } => Some(source),
            Self::Json(e) => Some(e),
            _ => None,
        }
    }
}

impl From<CheckpointError> for Error {
    fn from(e: CheckpointError) -> Self {
        Self::Checkpoint(e)
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Self::Json(e)
    }
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
