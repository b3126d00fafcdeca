use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("invalid patch grid (W={image_size}, P={patch_size}, S={stride}): {reason}")]
    Grid {
        image_size: usize,
        patch_size: usize,
        stride: usize,
        reason: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("degenerate embedding: row {row} has zero norm before normalization")]
    DegenerateEmbedding { row: usize },

    #[error("non-finite gradient in parameter block `{0}`")]
    NonFiniteGradient(String),

    #[error("unsupported or corrupt image {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("dataset at {0} contains no decodable images")]
    EmptyDataset(PathBuf),

    #[error("no identity has two or more images; genuine pairs impossible")]
    NoGenuinePairs,

    #[error("AUC undefined: {0}")]
    UndefinedAuc(&'static str),

    #[error("division by zero: {0}")]
    Division(&'static str),

    #[error("malformed {kind} file: {reason}")]
    Malformed { kind: &'static str, reason: String },

    #[error("backward already consumed this tape")]
    TapeConsumed,

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad inputs or configuration rather than a
    /// failure part-way through a run.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Parameter(_) | Error::Grid { .. } | Error::Config(_) | Error::Contract(_)
        )
    }
}
