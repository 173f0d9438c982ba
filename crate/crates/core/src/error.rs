use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the colorization lab.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("degenerate column {column} (all entries zero)")]
    DegenerateColumn { column: usize },

    #[error("stale tap handles: recorded on graph {recorded}, current graph {current}")]
    StaleHandle { recorded: u64, current: u64 },

    #[error("capability missing: {0}")]
    Capability(String),

    #[error("linear solver failed: {0}")]
    Solver(String),

    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("checksum mismatch for {what}: expected {expected}, got {actual}")]
    Checksum {
        what: String,
        expected: String,
        actual: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shapes(what: &str, a: &[usize], b: &[usize]) -> Self {
        Error::Dimension(format!("{what}: {a:?} vs {b:?}"))
    }
}
