//! A small chain environment, linear policies, sample batches and a
//! prioritized replay buffer.

mod batch;
mod env;
mod policy;
mod replay;

use thiserror::Error;

pub use batch::{MultiAgentBatch, PolicyId, SampleBatch, DEFAULT_POLICY};
pub use env::{one_hot, ChainEnv, ChainSpec, Step, LEFT, NUM_ACTIONS, RIGHT};
pub use policy::{
    compute_gradients, greedy_solves, rollout, sigmoid, softmax, td_gradients, EpisodeRunner, Gradients, Policy,
    PolicyKind, PolicyWeights, Rollout,
};
pub use replay::{PrioritizedReplayBuffer, ReplayStats, SampledBatch, DEFAULT_ALPHA, DEFAULT_BETA};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RlError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("priority must be positive and finite, got {0}")]
    Priority(f64),
    #[error("cannot sample from an empty replay buffer")]
    EmptyBuffer,
}

/// Seed for worker `index` derived from a run seed (SplitMix64 finalizer).
pub fn worker_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed
        .wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(index as u64 + 1));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
