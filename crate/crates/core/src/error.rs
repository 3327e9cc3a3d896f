use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("invalid network: node `{node}`: {message}")]
    Validation { node: String, message: String },

    #[error("enumeration refused: {configurations} configurations exceed the cap of {cap}")]
    EnumerationCap { configurations: u128, cap: u128 },

    #[error("objective diverged at iteration {iteration}: {value}")]
    Divergent { iteration: usize, value: f64 },

    #[error("internal error: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
