use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("invalid scene ({} problem{}):\n  {}", .0.len(), if .0.len() == 1 { "" } else { "s" }, .0.join("\n  "))]
    Validation(Vec<String>),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("frame {frame}: {source}")]
    Solver { frame: usize, source: heterodyn::Error },
    #[error(transparent)]
    Core(#[from] heterodyn::Error),
    #[error("csv output: {0}")]
    Csv(#[from] csv::Error),
    #[error("json output: {0}")]
    Json(#[from] serde_json::Error),
    #[error("gradient check failed: max relative error {max_error:e} exceeds {threshold:e}")]
    GradcheckFailed { max_error: f64, threshold: f64 },
    #[error("optimizer stalled after {evaluations} evaluations (best loss {best_loss:e})")]
    OptimizerStalled { evaluations: usize, best_loss: f64 },
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    /// Process exit code for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::GradcheckFailed { .. } => 2,
            Self::OptimizerStalled { .. } => 3,
            _ => 1,
        }
    }
}
