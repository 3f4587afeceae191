use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the solver pipeline.
#[derive(Debug, Error)]
pub enum CemError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("index {index} out of range (limit {limit})")]
    Index { index: usize, limit: usize },

    #[error("format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },

    #[error("iterative solver stopped after {iterations} iterations with relative residual {residual:e}")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("rank deficiency: {0}")]
    Rank(String),

    #[error("matrix is not positive definite: {0}")]
    Definiteness(String),

    #[error("auxiliary space selection error: {0}")]
    Selection(String),

    #[error("unstable time integration at step {step}: {reason}")]
    Instability { step: usize, reason: String },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CemError {
    /// Process exit status for the command-line front end: 1 for configuration
    /// and input problems, 2 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CemError::Config(_)
            | CemError::Index { .. }
            | CemError::Format { .. }
            | CemError::Selection(_)
            | CemError::Io { .. } => 1,
            CemError::NoConvergence { .. }
            | CemError::Rank(_)
            | CemError::Definiteness(_)
            | CemError::Instability { .. } => 2,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CemError::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, CemError>;
