use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, OpqError>;

/// Errors produced anywhere in the allocation / compression pipeline.
#[derive(Debug, Error)]
pub enum OpqError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },

    #[error("non-finite value at layer {layer} index {index}")]
    NonFinite { layer: String, index: usize },

    #[error("length mismatch for layer {layer}: manifest declares {expected} values, blob holds {actual}")]
    LengthMismatch {
        layer: String,
        expected: usize,
        actual: usize,
    },

    #[error("duplicate layer name {0}")]
    DuplicateLayer(String),

    #[error("invalid layer spec {layer}: {message}")]
    InvalidLayer { layer: String, message: String },

    #[error("{what} index {index} out of range (len {len})")]
    OutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("degenerate layer: zero weights ({layer})")]
    DegenerateLayer { layer: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("solver did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("every layer is fully pruned; no quantization budget can be met")]
    AllLayersPruned,

    #[error("layer {layer} has unpruned weights but no codebook")]
    MissingCodebook { layer: String },

    #[error("level {level} of layer {layer} does not fit in {bits} bits")]
    LevelOverflow { layer: String, level: u64, bits: u8 },

    #[error("corrupt artifact ({context}) at byte offset {offset}")]
    Corrupt { context: String, offset: usize },

    #[error("checksum mismatch in {context}: stored {stored:08x}, computed {computed:08x}")]
    Checksum {
        context: String,
        stored: u32,
        computed: u32,
    },

    #[error("model hash mismatch: artifact {artifact}, model {model}")]
    HashMismatch { artifact: String, model: String },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("verification failed: {0}")]
    Verification(String),
}

impl OpqError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        OpqError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn corrupt(context: impl Into<String>, offset: usize) -> Self {
        OpqError::Corrupt {
            context: context.into(),
            offset,
        }
    }

    /// Process exit code used by the command-line front end.
    ///
    /// 1 = validation, 2 = computation failure, 3 = verification failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            OpqError::Io { .. }
            | OpqError::Manifest { .. }
            | OpqError::NonFinite { .. }
            | OpqError::LengthMismatch { .. }
            | OpqError::DuplicateLayer(_)
            | OpqError::InvalidLayer { .. }
            | OpqError::OutOfRange { .. }
            | OpqError::InvalidArgument(_)
            | OpqError::HashMismatch { .. } => 1,
            OpqError::DegenerateLayer { .. }
            | OpqError::NoConvergence { .. }
            | OpqError::AllLayersPruned
            | OpqError::MissingCodebook { .. }
            | OpqError::LevelOverflow { .. }
            | OpqError::Invariant(_) => 2,
            OpqError::Corrupt { .. } | OpqError::Checksum { .. } | OpqError::Verification(_) => 3,
        }
    }
}
