use thiserror::Error;

use crate::grammar::ParseError;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Parse(#[from] ParseError),

    #[error("unknown token `{0}`")]
    UnknownToken(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("scene infeasible after {samples} samples")]
    Infeasible { samples: u64 },

    #[error("no proposal scores above the unary threshold for node {node}")]
    NoCandidate { node: usize },

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Diverged { epoch: usize },

    #[error("Riccati backward pass failed: regularization {mu:e} exceeded cap at iteration {iteration}")]
    RiccatiFailure { mu: f64, iteration: usize },

    #[error("regression is rank deficient at timestep {timestep} ({rollouts} rollouts, {unknowns} unknowns)")]
    RankDeficient {
        timestep: usize,
        rollouts: usize,
        unknowns: usize,
    },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
