use thiserror::Error;

/// Invalid tensor or factor input.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("tensor data has {actual} entries, expected {expected}")]
    Length { expected: usize, actual: usize },
    #[error("non-finite entry at flat offset {0}")]
    NonFinite(usize),
    #[error("tensor dimensions must be positive, got {0:?}")]
    ZeroDimension([usize; 3]),
    #[error("expected an order-3 tensor, got {0} dimensions")]
    Order(usize),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("requested rank {rank} exceeds dimension {dim}")]
    Rank { rank: usize, dim: usize },
    #[error("factor {factor} is not columnwise orthonormal (deviation {deviation:e})")]
    NotOrthonormal { factor: &'static str, deviation: f64 },
}

/// Errors from the small numeric kernels.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("vector lengths differ: {0} vs {1}")]
    Length(usize, usize),
    #[error("rotation indices must differ and be in range, got ({i}, {j}) for size {n}")]
    Indices { i: usize, j: usize, n: usize },
}

/// Errors surfaced by the existence decision.
#[derive(Debug, Error)]
pub enum ExistenceError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("no start converged ({runs} runs of {problem})")]
    NoConvergence { problem: String, runs: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// Errors from simulation campaigns and report writing.
#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
