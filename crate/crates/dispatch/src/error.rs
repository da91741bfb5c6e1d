use std::path::PathBuf;

use thiserror::Error;

/// Failures reading case, scenario or grid files.
#[derive(Debug, Error)]
pub enum IngestError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("{0}")]
    Structure(String),

    #[error(transparent)]
    Core(#[from] tcl_dispatch_core::Error),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl IngestError {
    pub fn parse(line: usize, msg: impl Into<String>) -> Self {
        IngestError::Parse { line, msg: msg.into() }
    }
}

/// Failures writing output bundles.
#[derive(Debug, Error)]
pub enum ExportError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
