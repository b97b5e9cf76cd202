use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid mesh step {0}: must be positive and finite")]
    InvalidStep(f64),
    #[error("no triangle survives clipping to the domain")]
    EmptyMesh,
    #[error("degenerate element {0} (zero area)")]
    DegenerateElement(usize),
    #[error("mesh invariant violated: {0}")]
    InvariantViolation(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid domain descriptor: {0}")]
    Domain(String),

    #[error("invalid layer dimension: {0}")]
    InvalidDim(String),
    #[error("empty sparsity pattern ({rows}x{cols}, r = {r})")]
    EmptyPattern { rows: usize, cols: usize, r: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("architecture error in stanza {index}: {msg}")]
    Spec { index: usize, msg: String },
    #[error("model file: {0}")]
    ModelFormat(String),

    #[error("sample {0} has a target with zero L2 norm")]
    ZeroTarget(usize),
    #[error("non-finite loss at epoch {0}")]
    NonFiniteLoss(usize),
    #[error("invalid training configuration: {0}")]
    TrainConfig(String),

    #[error("eigen-solver did not converge: {0}")]
    EigFailure(String),
    #[error("truncation k = {k} exceeds node count {n}")]
    Truncation { k: usize, n: usize },

    #[error("no boundary sample satisfies y2 > {0}")]
    EmptyBoundary(f64),
    #[error("newton iteration diverged after {iters} iterations (residual {residual:e})")]
    NewtonDiverged { iters: usize, residual: f64 },
    #[error("singular linear system (pivot {0})")]
    SingularSystem(usize),
    #[error("sample {index}: {source}")]
    Sample {
        index: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("unknown operator id {0:?}")]
    UnknownOperator(String),

    #[error("at least two generator points are required, got {0}")]
    TooFewPoints(usize),
    #[error("vascular network has zero total length")]
    EmptyNetwork,
    #[error("lambda = {lambda}, replicate {rep}: {source}")]
    Replicate {
        lambda: f64,
        rep: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            line,
            msg: msg.into(),
        }
    }
}
