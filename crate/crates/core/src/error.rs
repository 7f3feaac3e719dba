use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("input of {len} tokens exceeds the window of {window}")]
    Window { len: usize, window: usize },

    #[error("token id {id} outside vocabulary of {vocab}")]
    Vocab { id: u32, vocab: usize },

    #[error("invalid state: {0}")]
    State(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error at line {line}, column {column}: {msg}")]
    Parse { line: usize, column: usize, msg: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("range error: {0}")]
    Range(String),

    #[error("data error at line {line}: {msg}")]
    Data { line: usize, msg: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("benchmark error: {0}")]
    Bench(String),

    #[error("cross-attention failed at layer {layer}, head {head}: {source}")]
    Provider {
        layer: usize,
        head: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub fn shape(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        Error::Shape { op, left, right }
    }

    pub fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    /// Short machine-readable category used by the CLI.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::Argument(_) => "argument",
            Error::Numeric(_) => "numeric",
            Error::Window { .. } => "window",
            Error::Vocab { .. } => "vocab",
            Error::State(_) => "state",
            Error::Config(_) => "config",
            Error::Parse { .. } => "parse",
            Error::Validation(_) => "validation",
            Error::Range(_) => "range",
            Error::Data { .. } => "data",
            Error::Format(_) => "format",
            Error::Bench(_) => "bench",
            Error::Provider { source, .. } => source.category(),
            Error::Io(_) => "io",
        }
    }
}
