use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = LodaError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum LodaError {
    #[error("matrix is not symmetric (relative asymmetry {asymmetry:.3e})")]
    NotSymmetric { asymmetry: f64 },

    #[error("rank {rank} exceeds dimension {dim}")]
    RankTooLarge { rank: usize, dim: usize },

    #[error("matrix is not positive definite: non-positive pivot at index {pivot}")]
    NotPositiveDefinite { pivot: usize },

    #[error("rows are linearly dependent: row {row} lies in the span of the preceding rows")]
    RankDeficient { row: usize },

    #[error("triangular system is singular: zero diagonal at index {index}")]
    Singular { index: usize },

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("undefined relative energy: {0}")]
    UndefinedRelativeEnergy(&'static str),

    #[error("cholesky of past statistics failed with jitter {jitter:.3e} ({source}); raise the jitter")]
    JitterTooSmall {
        jitter: f64,
        #[source]
        source: Box<LodaError>,
    },

    #[error("non-finite values: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: row {row}: {message}")]
    Parse {
        path: PathBuf,
        row: usize,
        message: String,
    },

    #[error("malformed file {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("task {task}, stage {stage}: {source}")]
    Stage {
        task: usize,
        stage: &'static str,
        #[source]
        source: Box<LodaError>,
    },
}

impl LodaError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LodaError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn at_stage(self, task: usize, stage: &'static str) -> Self {
        LodaError::Stage {
            task,
            stage,
            source: Box::new(self),
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            LodaError::Config(_)
            | LodaError::InvalidArgument(_)
            | LodaError::Parse { .. }
            | LodaError::Format { .. } => 2,
            LodaError::Io { .. } => 4,
            LodaError::Stage { source, .. } => source.exit_code(),
            _ => 3,
        }
    }
}
