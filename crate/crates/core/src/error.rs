//! Error type shared across the crate.

use thiserror::Error;

use crate::model::checkpoint::CheckpointError;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {op} got shapes {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid probability {0}: expected 0 <= p < 1")]
    InvalidProbability(f32),
    #[error("empty loss: every position is ignored")]
    EmptyLoss,
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("unknown graph node {0}")]
    UnknownNode(usize),
    #[error("config error: {0}")]
    Config(String),
    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    Vocabulary { id: usize, vocab_size: usize },
    #[error("gating error: {0}")]
    Gating(String),
    #[error("empty sequence: row {0} has no real tokens")]
    EmptySequence(usize),
    #[error("similarity undefined: zero-norm vector in row {0}")]
    SimilarityUndefined(usize),
    #[error("wiring error: {0}")]
    Wiring(String),
    #[error("task error: {0}")]
    Task(String),
    #[error("comparison error: {0}")]
    Comparison(String),
    #[error("missing dependency: {0}")]
    Dependency(String),
    #[error("aggregation error: {0}")]
    Aggregation(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
