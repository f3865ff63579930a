use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("need at least {need} trajectories, got {got}")]
    TooFewTrajectories { need: usize, got: usize },

    #[error("integration failed at t = {t:.6} μs: {reason}")]
    Integration { t: f64, reason: String },

    #[error("no energy in the bracket reaches the target angle: {0}")]
    NoEnergyBracket(String),

    #[error("endpoint mismatch: {0}")]
    EndpointMismatch(String),

    #[error("fit needs at least {need} overlapping bins, got {got}")]
    InsufficientBins { need: usize, got: usize },

    #[error("no bifurcation in [{lo}, {hi}]: fixed-point count is {count} throughout")]
    NoTransition { lo: f64, hi: f64, count: usize },

    #[error("malformed data: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
