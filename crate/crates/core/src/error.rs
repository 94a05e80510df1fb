use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: [usize; 2],
        right: [usize; 2],
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("ingestion of {path} failed: {malformed} of {total} lines malformed (first at lines {lines:?})")]
    Ingestion {
        path: PathBuf,
        malformed: usize,
        total: usize,
        lines: Vec<usize>,
    },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("no precomputed embedding for items: {0:?}")]
    MissingEmbedding(Vec<String>),

    #[error("unknown {kind} ids: {ids:?}")]
    UnknownIds {
        kind: &'static str,
        ids: Vec<String>,
    },

    #[error("non-finite loss at epoch {epoch}, batch {batch}; parameter norms: {norms}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        norms: String,
    },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }
}
