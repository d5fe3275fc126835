//! Crate-wide error type.

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
///
/// The CLI maps these onto process exit codes: configuration problems exit
/// with 2, numerical failures with 3, everything else with 1.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("{op}: non-finite input value")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar root, got shape {shape:?}")]
    NonScalarRoot { shape: (usize, usize) },

    #[error("NaN encountered during gradient accumulation at tape node {node} ({op})")]
    NanInBackward { node: usize, op: &'static str },

    #[error("value belongs to a different tape generation")]
    TapeGeneration,

    #[error("Cholesky factorization failed: matrix is not positive definite (pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },

    #[error("adjacency matrix contains a cycle")]
    CyclicGraph,

    #[error("{0}")]
    InvalidArgument(String),

    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    Dimension {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("{path}:{line}: {msg}")]
    DataFormat {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("missing ground-truth annotations: {0}")]
    MissingTruth(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite loss component {component} on task {task}")]
    NonFiniteLoss { component: &'static str, task: usize },

    #[error("inner-loop divergence: loss grew {factor:.1}x over the adaptation steps; lower the inner learning rate")]
    InnerLoopDiverged { factor: f64 },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Process exit code for the CLI: 2 for configuration errors, 3 for
    /// numerical failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::NonFinite { .. }
            | Error::NanInBackward { .. }
            | Error::NotPositiveDefinite { .. }
            | Error::NonFiniteLoss { .. }
            | Error::InnerLoopDiverged { .. } => 3,
            _ => 1,
        }
    }

    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
