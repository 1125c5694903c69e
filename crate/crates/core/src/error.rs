use std::fmt;

use thiserror::Error;

/// Failure to parse program text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseError {
    /// Token index at which parsing failed.
    pub position: usize,
    /// Token class the parser expected at `position`.
    pub expected: &'static str,
    pub found: Option<String>,
}

impl ParseError {
    pub(crate) fn new(position: usize, expected: &'static str) -> Self {
        ParseError {
            position,
            expected,
            found: None,
        }
    }
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "at token {}: expected {}", self.position, self.expected)?;
        match &self.found {
            Some(found) => write!(f, ", found {found}"),
            None => write!(f, ", found end of input"),
        }
    }
}

impl std::error::Error for ParseError {}

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error {0}")]
    Parse(#[from] ParseError),

    #[error("local structure size must be at least 1, got {0}")]
    Size(usize),

    #[error("{path}:{line}: {reason}")]
    Format {
        path: String,
        line: usize,
        reason: String,
    },

    #[error("synthetic generation failed: {0}")]
    Generation(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("every action is masked")]
    EmptyActionSpace,

    #[error("candidate pool is empty")]
    EmptyPool,

    #[error("pool has {pool} candidates but {k} were requested")]
    PoolTooSmall { pool: usize, k: usize },

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("non-finite loss at epoch {epoch}, step {step}: {value}")]
    NonFiniteLoss { epoch: usize, step: usize, value: f64 },

    #[error("non-finite objective: {0}")]
    NonFiniteObjective(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("client error: {0}")]
    Client(String),

    #[error("authentication rejected: {0}")]
    Auth(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
