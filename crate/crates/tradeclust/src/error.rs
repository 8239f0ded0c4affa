use std::path::PathBuf;

use crate::nullmodel::NullModel;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("{rejected} of {total} rows malformed (>{limit} allowed); first: {first}")]
    TooManyBadRows {
        rejected: usize,
        total: usize,
        limit: usize,
        first: String,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("insufficient data: {what} needs {needed}, got {got}")]
    Insufficient {
        what: String,
        needed: usize,
        got: usize,
    },

    #[error("snapshot is empty")]
    EmptySnapshot,

    #[error(
        "null-model solver did not converge: residual {residual:e} after {iterations} iterations"
    )]
    SolverDidNotConverge {
        residual: f64,
        iterations: u32,
        /// Best iterate reached; callers may inspect it or relax the tolerance.
        best: Box<NullModel>,
    },

    #[error("snapshot has {snapshot} securities x {model} model entries; inputs are inconsistent")]
    DimensionMismatch { snapshot: usize, model: usize },

    #[error("enumeration cap exceeded: {cells} cells > {cap}")]
    EnumerationCapExceeded { cells: usize, cap: usize },

    #[error("infeasible generator spec: {0}")]
    InfeasibleSpec(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("stage '{stage}' failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn stage(stage: &'static str) -> impl FnOnce(Error) -> Error {
        move |source| Error::Stage {
            stage,
            source: Box::new(source),
        }
    }

    /// Process exit code convention: 2 for usage/config problems, 1 for
    /// failures inside a stage.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Stage { source, .. } => source.exit_code(),
            _ => 1,
        }
    }
}
