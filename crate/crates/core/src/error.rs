use num_bigint::BigUint;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("insufficient data: need at least {needed} points, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("enumeration refused: {count} patterns exceed limit {limit}")]
    EnumerationRefused { count: BigUint, limit: u64 },

    #[error("duplicate points: index {query} coincides with index {neighbor}")]
    DuplicatePoint { query: usize, neighbor: usize },

    #[error("degenerate neighborhood: all {k} neighbor distances are equal")]
    DegenerateNeighborhood { k: usize },

    #[error("subsample {index}: {source}")]
    Subsample {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("infeasible sparsity: k = {k} is below the cover overlap {overlap}")]
    InfeasibleSparsity { k: usize, overlap: usize },

    #[error("non-finite value in block {block}, token {token}")]
    NonFinite { block: usize, token: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
