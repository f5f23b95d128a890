use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failure classes surfaced by the toolkit. The CLI maps each onto an exit code
/// via [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate mask")]
    DegenerateMask,

    #[error("zero-distance pair")]
    ZeroDistancePair,

    #[error("placement exhausted after {attempts} attempts for object {object}")]
    PlacementExhausted { object: usize, attempts: usize },

    #[error("mask grids differ: {a:?} vs {b:?}")]
    GridMismatch { a: (usize, usize), b: (usize, usize) },

    #[error("undefined direction")]
    UndefinedDirection,

    #[error("no paths")]
    NoPaths,

    #[error("shape error: {op} got {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite input to {0}")]
    NonFinite(&'static str),

    #[error("scalar required, got shape {0:?}")]
    ScalarRequired(Vec<usize>),

    #[error("diverged: {0}")]
    Diverged(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("empty index")]
    EmptyIndex,

    #[error("insufficient corpus: {have} scenes, need at least {need}")]
    InsufficientCorpus { have: usize, need: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("output directory {0} is not empty (use --force)")]
    OutputExists(PathBuf),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// 2 usage, 3 data, 4 numerical divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::OutputExists(_) => 2,
            Error::Diverged(_) | Error::NonFinite(_) => 4,
            _ => 3,
        }
    }
}
