use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("non-finite right-hand side in component {component} of {system}")]
    Domain { system: String, component: usize },

    #[error("integration diverged at t = {time}")]
    Divergence { time: f64 },

    #[error("matrix is ill-conditioned (condition estimate {condition:.3e}) even with jitter {jitter:.1e}")]
    IllConditioned { condition: f64, jitter: f64 },

    #[error("non-finite objective (prior {prior}, physics {physics}, data {data})")]
    NonFiniteObjective { prior: f64, physics: f64, data: f64 },

    #[error("optimizer diverged after {iterations} iterations")]
    OptimizerDiverged { iterations: usize, last_finite: Vec<f64> },

    #[error("malformed input: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn precondition(msg: impl Into<String>) -> Error {
    Error::Precondition(msg.into())
}
