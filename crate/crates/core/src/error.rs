use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid paste region: {0}")]
    InvalidRegion(String),

    #[error("conjugate gradient did not converge after {iterations} iterations (relative residual {rel_residual:e})")]
    NotConverged { iterations: usize, rel_residual: f64 },

    #[error("duplicate tile at grid position ({row}, {col})")]
    DuplicateTile { row: u32, col: u32 },

    #[error("cell bank has no {0} cells")]
    EmptyCellBank(&'static str),

    #[error("embedding id not found: {0}")]
    MissingEmbedding(String),

    #[error("embedding file format error: {0}")]
    Format(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("AUC needs both classes, got {positives} positives and {negatives} negatives")]
    SingleClass { positives: usize, negatives: usize },

    #[error("label {0} is outside the class set")]
    UnknownClass(u32),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("json error at {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("csv error at {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json { path: path.into(), source }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        Error::Csv { path: path.into(), source }
    }
}
