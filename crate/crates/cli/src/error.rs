use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),
    #[error("schema violation: {0}")]
    Schema(String),
    #[error("incompatible inputs: {0}")]
    Incompatible(String),
    #[error("computation failed: {0}")]
    Compute(ael_core::Error),
    #[error("i/o error on {}: {source}", .path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::MissingFile(_) => 3,
            CliError::Schema(_) => 4,
            CliError::Incompatible(_) => 5,
            CliError::Compute(_) => 6,
            CliError::Io { .. } => 7,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::MissingFile(_) => "missing_file",
            CliError::Schema(_) => "schema_violation",
            CliError::Incompatible(_) => "incompatible",
            CliError::Compute(_) => "computation",
            CliError::Io { .. } => "io",
        }
    }

    pub fn from_read(path: &Path, e: std::io::Error) -> Self {
        if e.kind() == std::io::ErrorKind::NotFound {
            CliError::MissingFile(path.to_path_buf())
        } else {
            CliError::Io { path: path.to_path_buf(), source: e }
        }
    }

    /// One JSON line for stderr.
    pub fn diagnostic(&self) -> String {
        serde_json::json!({ "error": self.kind(), "code": self.code(), "message": self.to_string() }).to_string()
    }
}

impl From<ael_core::Error> for CliError {
    fn from(e: ael_core::Error) -> Self {
        match e {
            ael_core::Error::DimensionMismatch { .. } | ael_core::Error::ForeignTrace(_) => CliError::Incompatible(e.to_string()),
            other => CliError::Compute(other),
        }
    }
}
