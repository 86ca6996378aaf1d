//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

use crate::ckg::EntityId;

/// Errors surfaced by the library and the CLI.
#[derive(Debug, Error)]
pub enum CerecError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    /// An interaction references an item with no entity alignment entry.
    #[error("item {item} has no alignment entry")]
    UnalignedItem { item: u64 },

    #[error("unknown entity {0}")]
    UnknownEntity(EntityId),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// The sampler cannot take a step from the current state.
    #[error("dead end: {0}")]
    DeadEnd(String),

    /// Enumeration would exceed the configured budget.
    #[error("enumeration budget exceeded: {needed} paths > budget {budget}")]
    BudgetExceeded { needed: usize, budget: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

impl CerecError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        CerecError::InvalidArgument(msg.into())
    }

    /// Process exit code for the CLI: 1 usage, 2 data, 3 reserved for
    /// oracle failures (raised by the oracle command itself).
    pub fn exit_code(&self) -> i32 {
        match self {
            CerecError::InvalidArgument(_) | CerecError::InvalidConfig(_) => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, CerecError>;
