//! Crate-wide error type.

/// Errors produced by dataset parsing, numeric kernels, and the training
/// loop. Message text is written to be actionable on its own: parse errors
/// carry 1-based line numbers, config errors list every offending key.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("length mismatch: {left} vs {right}{}", context_suffix(.context))]
    LengthMismatch {
        left: usize,
        right: usize,
        context: &'static str,
    },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("index {index} out of range (bound {bound}){}", context_suffix(.context))]
    IndexOutOfRange {
        index: usize,
        bound: usize,
        context: &'static str,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("malformed file: {0}")]
    MalformedFile(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn context_suffix(context: &'static str) -> String {
    if context.is_empty() {
        String::new()
    } else {
        format!(" in {context}")
    }
}

pub type Result<T> = std::result::Result<T, Error>;
