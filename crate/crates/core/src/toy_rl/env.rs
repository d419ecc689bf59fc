use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::RlError;

pub const LEFT: usize = 0;
pub const RIGHT: usize = 1;
pub const NUM_ACTIONS: usize = 2;

/// Parameters of a [`ChainEnv`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChainSpec {
    pub n_states: usize,
    pub max_steps: usize,
    /// Probability that an action is replaced by its opposite.
    #[serde(default)]
    pub slip: f64,
}

impl ChainSpec {
    /// Chain with an episode cap of twice the shortest path.
    pub fn new(n_states: usize) -> Self {
        ChainSpec {
            n_states,
            max_steps: 2 * n_states.saturating_sub(1),
            slip: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), RlError> {
        if self.n_states < 2 {
            return Err(RlError::Config(format!("chain needs at least 2 states, got {}", self.n_states)));
        }
        if self.max_steps == 0 {
            return Err(RlError::Config("max_steps must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.slip) {
            return Err(RlError::Config(format!("slip must be a probability, got {}", self.slip)));
        }
        Ok(())
    }
}

/// Corridor of `n_states` cells. Episodes start in cell 0; moving right into
/// the last cell pays 1.0 and ends the episode; every other step pays 0.
/// Episodes are also cut off after `max_steps` steps.
#[derive(Debug, Clone)]
pub struct ChainEnv {
    spec: ChainSpec,
    state: usize,
    steps: usize,
    seed: u64,
    rng: ChaCha8Rng,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub obs: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

impl ChainEnv {
    pub fn new(spec: ChainSpec, seed: u64) -> Result<Self, RlError> {
        spec.validate()?;
        Ok(ChainEnv {
            spec,
            state: 0,
            steps: 0,
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn spec(&self) -> ChainSpec {
        self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn obs_dim(&self) -> usize {
        self.spec.n_states
    }

    pub fn state(&self) -> usize {
        self.state
    }

    pub fn reset(&mut self) -> Vec<f64> {
        self.state = 0;
        self.steps = 0;
        self.observe()
    }

    pub fn observe(&self) -> Vec<f64> {
        one_hot(self.state, self.spec.n_states)
    }

    pub fn step(&mut self, action: usize) -> Step {
        let mut action = action.min(RIGHT);
        if self.spec.slip > 0.0 && self.rng.gen::<f64>() < self.spec.slip {
            action = 1 - action;
        }
        self.state = if action == RIGHT {
            (self.state + 1).min(self.spec.n_states - 1)
        } else {
            self.state.saturating_sub(1)
        };
        self.steps += 1;
        let reached = self.state == self.spec.n_states - 1;
        Step {
            obs: self.observe(),
            reward: if reached { 1.0 } else { 0.0 },
            done: reached || self.steps >= self.spec.max_steps,
        }
    }
}

pub fn one_hot(i: usize, n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[i] = 1.0;
    v
}
