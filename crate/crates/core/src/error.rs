use thiserror::Error;

/// Errors raised by the beamtrack toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("pathloss must be positive, got {0}")]
    NonPositivePathloss(f64),

    #[error("grid cell {cell} has zero gain on every beam pair")]
    ZeroGainCell { cell: usize },

    #[error("no threshold crossing of p_fa and p_md in [0, {eta_max}]")]
    NoThresholdCrossing { eta_max: f64 },

    #[error("observation distribution sums to {0}, expected 1")]
    Unnormalized(f64),

    #[error("observation has zero likelihood under the current belief")]
    ZeroLikelihood,

    #[error("feedback {0:?} is not in the scanned set or 0")]
    InconsistentFeedback(Option<usize>),

    #[error("emission likelihoods vanish for every state at frame {0}")]
    DegenerateEmission(usize),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("unsupported file version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
