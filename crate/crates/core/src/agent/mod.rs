//! PPO agent: dense networks, masked sampling, rollouts and training.

pub mod checkpoint;
pub mod nn;
pub mod policy;
pub mod ppo;
pub mod rollout;
pub mod simple;
pub mod train;

use thiserror::Error;

use crate::env::EnvError;

pub use policy::{ActionSpaceKind, NetConfig, PolicyParams};
pub use ppo::{PPOConfig, RolloutBatch};
pub use train::{train, TrainConfig, TrainLogEntry};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("every entry of a distribution is masked")]
    AllMasked,
    #[error("{what} has length {got}, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("batch has {got} transitions, expected {expected}")]
    BatchSize { expected: usize, got: usize },
    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),
    #[error("malformed sample: {0}")]
    BadSample(&'static str),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
