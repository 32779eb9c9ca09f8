use thiserror::Error;

/// Errors raised across simulation, assembly, solving and evaluation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("pairing requires even N (got {0})")]
    OddPairing(usize),

    #[error("invalid pairing plan: {0}")]
    InvalidPairing(String),

    #[error("non-finite kernel evaluation for agent {agent} at r = {r}")]
    NonFiniteKernel { agent: usize, r: f64 },

    #[error("regime requires recorded S^n pairings")]
    MissingPairings,

    #[error("stride {stride} with {snapshots} snapshots exceeds data length {available}")]
    StrideTooLong { stride: usize, snapshots: usize, available: usize },

    #[error("relative error undefined: reference function has zero norm")]
    ZeroReference,

    #[error("W1 via sorted samples needs d = 1 (got d = {0}); use density_l1 for d > 1")]
    SortedW1Dimension(usize),

    #[error("theorem hypothesis violated: {0}")]
    BoundHypothesis(String),

    #[error("infeasible constraint set: {0}")]
    Infeasible(String),

    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("trajectory file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Whether the error stems from numerics rather than from inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFiniteKernel { .. } | Error::Infeasible(_) | Error::ZeroReference
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
