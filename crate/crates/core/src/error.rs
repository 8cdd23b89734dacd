use std::io;

/// Errors produced by parsing, validation, and experiment plumbing.
///
/// Hot-path numeric routines (likelihood evaluation, search) do not return
/// `Result`; they assert their preconditions and are documented accordingly.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("{path}: {source}")]
    File { path: String, source: io::Error },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("invalid rate: {0}")]
    InvalidRate(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse { line, msg: msg.into() }
    }

    /// I/o error tagged with the file it came from.
    pub fn file(path: &std::path::Path, source: io::Error) -> Self {
        Error::File { path: path.display().to_string(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
