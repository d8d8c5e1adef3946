use std::path::PathBuf;

/// Crate-wide error type.
///
/// The CLI maps variants onto process exit codes: config and validation
/// problems exit 2, stage-order violations exit 3, numerical aborts exit 4,
/// everything else exits 1.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("format error in {path:?} at byte offset {offset}: {message}")]
    Format {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("manifest error at line {line}: {message}")]
    Manifest { line: usize, message: String },

    #[error("stage order violation: {0}")]
    StageOrder(String),

    #[error("numerical abort at step {step} (batch {batch}): {message}")]
    Numeric {
        step: usize,
        batch: String,
        message: String,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Validation(_) => 2,
            Error::StageOrder(_) => 3,
            Error::Numeric { .. } => 4,
            _ => 1,
        }
    }
}
