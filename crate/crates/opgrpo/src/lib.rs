//! Off-policy GRPO for a toy flow-matching generative model.
//!
//! Trains a small velocity-field MLP on 2D synthetic tasks with analytic
//! rewards, using group-relative advantages and a clipped surrogate. The
//! off-policy machinery — high-quality replay buffer, sequence-level
//! importance-sampling correction, and late-step trajectory truncation —
//! is the point of the crate; everything else is the harness around it.

pub mod buffer;
pub mod cli;
pub mod diagnostics;
pub mod flow;
pub mod objective;
pub mod rewards;
pub mod rng;
pub mod rollout;
pub mod tensor;
pub mod trainer;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] tensor::TensorError),
    #[error("flow error: {0}")]
    Flow(String),
    #[error("buffer error: {0}")]
    Buffer(String),
    #[error("rollout error: {0}")]
    Rollout(String),
    #[error("objective error: {0}")]
    Objective(String),
    #[error("reward error: {0}")]
    Reward(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("training diverged: {0}")]
    Diverged(String),
}

pub type Result<T> = std::result::Result<T, Error>;
