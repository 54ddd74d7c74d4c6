use std::path::PathBuf;

/// Errors produced by the hessianscope library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),

    #[error("dimension mismatch: expected {expected}, got {actual} ({context})")]
    DimensionMismatch {
        expected: usize,
        actual: usize,
        context: &'static str,
    },

    #[error("parameter vector was shaped for a different network spec")]
    SpecMismatch,

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("empty batch")]
    EmptyBatch,

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("{order} parameters exceed the dense Hessian cap of {cap}")]
    CapExceeded { order: usize, cap: usize },

    #[error("assembled Hessian is not symmetric: defect {defect:e}")]
    SymmetryDefect { defect: f64 },

    #[error("eigendecomposition failed to converge")]
    Convergence,

    #[error("training diverged at iteration {iteration}")]
    Divergence { iteration: usize },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("parse error in {path} at byte offset {offset}: {message}")]
    Parse {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
