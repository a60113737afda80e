//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate point: {0}")]
    DegeneratePoint(String),
    #[error("manifold mismatch: {0}")]
    ManifoldMismatch(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("support too large: {size} exceeds exact-mode cap {cap}")]
    SupportTooLarge { size: usize, cap: usize },
    #[error("unsupported order: {0}")]
    UnsupportedOrder(String),
    #[error("missing auxiliary data: {0}")]
    MissingAuxiliary(String),
    #[error("non-finite state: {0}")]
    NonFinite(String),
    #[error("budget exhausted: {0}")]
    BudgetExhausted(String),
    #[error("config invalid: {0}")]
    ConfigInvalid(String),
    #[error("output unwritable: {0}")]
    OutputUnwritable(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
