use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed CSV {path}: {message}")]
    Csv { path: PathBuf, message: String },

    #[error("{path}: cannot parse cell at row {row}, column '{column}': {value:?}")]
    BadCell {
        path: PathBuf,
        row: usize,
        column: String,
        value: String,
    },

    #[error("invalid split: {0}")]
    Split(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("head {head}: {what} is not finite")]
    NonFinite { head: usize, what: &'static str },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("missing comparison cells: {}", .0.join(", "))]
    MissingCells(Vec<String>),

    #[error("all {0} cells failed")]
    AllCellsFailed(usize),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
