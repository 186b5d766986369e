use thiserror::Error;

use crate::tile_blas::BackendId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the engine can report.
///
/// The type is `Clone` because a failed task future hands the same error to
/// every consumer that depends on it.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid tiling: {tiles_per_dim} tiles per dimension for n = {n_total}")]
    InvalidTiling { n_total: usize, tiles_per_dim: usize },

    #[error("invalid hyperparameter {name} = {value}")]
    InvalidHyperparameter { name: &'static str, value: f64 },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("tile index ({i}, {j}) out of range for {tiles} tiles per dimension")]
    TileIndex { i: usize, j: usize, tiles: usize },

    #[error("matrix is not positive definite (tile {tile:?}, pivot {pivot})")]
    NotPositiveDefinite { tile: Option<usize>, pivot: usize },

    #[error("triangular factor is singular at diagonal element {index}")]
    SingularTriangular { index: usize },

    #[error("worker pool has been shut down")]
    PoolShutdown,

    #[error("a worker pool is already running on this engine")]
    PoolAlreadyStarted,

    #[error("no worker pool is running on this engine")]
    PoolNotStarted,

    #[error("worker count must be at least 1")]
    ZeroWorkers,

    #[error("task panicked: {0}")]
    TaskPanicked(String),

    #[error("backend {0} is not available (not built in, or failed its self-check)")]
    BackendUnavailable(BackendId),

    #[error("simulation became unstable at step {step}")]
    Unstable { step: usize },

    #[error("series of length {len} is too short for window {window}")]
    SeriesTooShort { len: usize, window: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("line {line}: malformed header: {reason}")]
    MalformedHeader { line: usize, reason: String },

    #[error("line {line}: expected {expected} data rows, found {found}")]
    RowCount { line: usize, expected: usize, found: usize },

    #[error("line {line}: expected {expected} fields, found {found}")]
    FieldCount { line: usize, expected: usize, found: usize },

    #[error("line {line}: non-numeric field {field:?}")]
    NonNumeric { line: usize, field: String },

    #[error("i/o error: {0}")]
    Io(String),

    #[error("optimization failed at iteration {iteration}: {source}")]
    Optimization { iteration: usize, source: Box<Error> },

    #[error("cannot summarize an empty group")]
    EmptyGroup,
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl Error {
    /// True for failures that come from the numerics rather than from
    /// configuration or I/O.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::NotPositiveDefinite { .. }
            | Error::SingularTriangular { .. }
            | Error::Unstable { .. } => true,
            Error::Optimization { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}
