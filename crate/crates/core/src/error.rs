use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("jam density exceeded: equilibrium gap {gap:.4} m does not exceed minimum gap {s0} m")]
    JamDensity { gap: f64, s0: f64 },

    #[error("non-positive headway {0} m passed to the car-following model")]
    NonPositiveHeadway(f64),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("empty {0}")]
    Empty(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
