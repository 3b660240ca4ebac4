//! Error type shared by all kernels, model code, and file formats.

use std::fmt;

pub type Result<T> = std::result::Result<T, CoreError>;

/// Errors emitted by tensor kernels, model construction, and I/O.
#[derive(Clone, Debug, PartialEq)]
pub enum CoreError {
    /// Two operands cannot be combined by the named op.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A single shape is invalid for the named op (bad extent, rank, divisibility).
    InvalidShape { op: &'static str, msg: String },
    /// A forward or backward kernel produced NaN or Inf.
    NonFinite { op: &'static str },
    /// `backward` was called on a non-scalar root.
    NonScalarRoot { shape: Vec<usize> },
    /// A mask contained values other than exactly 0 or 1.
    NonBinaryMask { value: f64 },
    /// Configuration rejected at load or validation time.
    Config { field: String, msg: String },
    /// Filesystem failure while reading or writing an artifact.
    Io { path: String, msg: String },
    /// A manifest, sidecar, or blob failed to parse or agree bit-exactly.
    Format { path: String, msg: String },
    /// Runtime numeric failure outside a single kernel (e.g. non-finite loss).
    Numeric { context: String },
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch: {lhs:?} vs {rhs:?}")
            }
            CoreError::InvalidShape { op, msg } => write!(f, "{op}: invalid shape: {msg}"),
            CoreError::NonFinite { op } => {
                write!(f, "{op}: non-finite value (NaN or Inf) in result")
            }
            CoreError::NonScalarRoot { shape } => {
                write!(f, "backward requires a scalar root, got shape {shape:?}")
            }
            CoreError::NonBinaryMask { value } => {
                write!(f, "mask must contain only 0 or 1, found {value}")
            }
            CoreError::Config { field, msg } => write!(f, "config error at `{field}`: {msg}"),
            CoreError::Io { path, msg } => write!(f, "io error at {path}: {msg}"),
            CoreError::Format { path, msg } => write!(f, "format error in {path}: {msg}"),
            CoreError::Numeric { context } => write!(f, "numeric error: {context}"),
        }
    }
}

impl std::error::Error for CoreError {}

impl CoreError {
    pub fn io(path: impl AsRef<std::path::Path>, err: std::io::Error) -> Self {
        CoreError::Io {
            path: path.as_ref().display().to_string(),
            msg: err.to_string(),
        }
    }

    pub fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        CoreError::Config {
            field: field.into(),
            msg: msg.into(),
        }
    }

    /// Process exit code contract: 1 for configuration/input problems,
    /// 2 for runtime numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CoreError::NonFinite { .. } | CoreError::Numeric { .. } => 2,
            _ => 1,
        }
    }
}
