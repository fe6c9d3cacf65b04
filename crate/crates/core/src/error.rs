use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{name} = {value} is outside its domain ({reason})")]
    Domain {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },

    #[error("unknown tableau `{0}`")]
    UnknownTableau(String),

    #[error("invalid tableau: {0}")]
    InvalidTableau(String),

    #[error("tree with {nodes} vertices exceeds the supported limit of {limit}")]
    TreeTooLarge { nodes: usize, limit: usize },

    #[error("character cutoffs differ ({left} vs {right})")]
    CutoffMismatch { left: usize, right: usize },

    #[error("non-finite state at step {step}")]
    BlowUp { step: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("incompatible grids: {0}")]
    Grid(String),

    #[error("reconstructed initial state drifted by {drift:e} (tolerance {tolerance:e})")]
    Divergence { drift: f64, tolerance: f64 },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
