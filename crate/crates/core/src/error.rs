use std::path::PathBuf;

use crate::pipeline::TraceEntry;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("degenerate dimension: {0}")]
    Degenerate(String),

    #[error("numerical instability: {0}")]
    Instability(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid pattern `{pattern}`: {source}")]
    Pattern {
        pattern: String,
        #[source]
        source: regex::Error,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("parse error in {path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    /// Training produced a non-finite loss. Carries the last parameters that
    /// were still finite so callers can persist them.
    #[error("training diverged at step {step} (non-finite loss)")]
    Diverged {
        step: usize,
        last_finite: Box<crate::model::Model>,
    },

    #[error("pipeline stage `{stage}` failed: {message}")]
    Pipeline {
        stage: String,
        message: String,
        trace: Vec<TraceEntry>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short machine-parsable category used by the CLI and the C ABI.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::EmptyInput(_) => "empty-input",
            Error::Degenerate(_) => "degenerate",
            Error::Instability(_) => "instability",
            Error::Config(_) => "config",
            Error::Pattern { .. } => "pattern",
            Error::Checkpoint(_) => "checkpoint",
            Error::Parse { .. } => "parse",
            Error::Diverged { .. } => "diverged",
            Error::Pipeline { .. } => "pipeline",
            Error::Io(_) => "io",
        }
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
