use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate domain: acceptance rate {rate:.3e} after {attempts} proposals")]
    DegenerateDomain { rate: f64, attempts: u64 },

    #[error("non-finite {quantity} at point {index}")]
    NonFinite {
        quantity: &'static str,
        index: usize,
    },

    #[error("solver failure: {0}")]
    Solver(String),

    #[error("snapshot: {0}")]
    Snapshot(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
