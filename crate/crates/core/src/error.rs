use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("degenerate: {0}")]
    Degenerate(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("simulation stalled after {events} events")]
    SimulationStall { events: usize },

    #[error("regression not identifiable: {0}")]
    Identifiability(String),

    #[error("IRLS did not converge after {iterations} iterations (max score {max_score:e})")]
    NonConvergence { iterations: usize, max_score: f64 },

    #[error("invalid uniformization rate {n}: must be at least {min_valid_n}")]
    InvalidRate { n: f64, min_valid_n: f64 },

    #[error("materialized dimension {dim} exceeds limit {limit}")]
    SizeLimit { dim: usize, limit: usize },

    #[error("{0}")]
    Input(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
