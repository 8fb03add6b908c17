use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("format error in {file}{}: {msg}", line.map(|l| format!(" (line {l})")).unwrap_or_default())]
    Format {
        file: PathBuf,
        line: Option<usize>,
        msg: String,
    },

    #[error("graph with {nodes} nodes cannot host a {trigger}-node trigger")]
    GraphTooSmall { nodes: usize, trigger: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn format(file: impl Into<PathBuf>, line: Option<usize>, msg: impl Into<String>) -> Self {
        Error::Format {
            file: file.into(),
            line,
            msg: msg.into(),
        }
    }
}
