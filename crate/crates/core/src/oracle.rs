//! Single-threaded reference trainers. No actors and no iterators: plain
//! loops over environments, used as ground truth for the dataflow plans.

use std::collections::VecDeque;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::algorithms::AlgorithmConfig;
use crate::ops::{agent_env_seed, replay_rng_seed, worker_rng_seed, PRIORITY_EPSILON};
use crate::pariter::WeightedRoundRobin;
use crate::toy_rl::{
    compute_gradients, greedy_solves, td_gradients, ChainEnv, EpisodeRunner, Policy, PolicyWeights,
    PrioritizedReplayBuffer, RlError, SampleBatch,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleAlgo {
    A2c,
    QLearning,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleRecord {
    pub iter: u64,
    pub steps_sampled: u64,
    pub learner_version: u64,
    pub mean_episode_reward: Option<f64>,
    pub greedy_solved: bool,
    /// True for Q-learning iterations that stored data rather than trained.
    pub store_round: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleRun {
    /// Learner weights after every iteration.
    pub weights: Vec<PolicyWeights>,
    pub records: Vec<OracleRecord>,
}

struct SimWorker {
    runner: EpisodeRunner,
    policy: Policy,
    rng: ChaCha8Rng,
    window: VecDeque<f64>,
}

fn sim_workers(cfg: &AlgorithmConfig, policy: &Policy) -> Result<Vec<SimWorker>, RlError> {
    (0..cfg.num_workers)
        .map(|i| {
            let env = ChainEnv::new(cfg.env_spec(), agent_env_seed(cfg.seed, i, 0))?;
            Ok(SimWorker {
                runner: EpisodeRunner::new(env),
                policy: policy.clone(),
                rng: ChaCha8Rng::seed_from_u64(worker_rng_seed(cfg.seed, i)),
                window: VecDeque::new(),
            })
        })
        .collect()
}

impl SimWorker {
    fn rollout(&mut self, horizon: usize) -> SampleBatch {
        let out = self.runner.rollout(&self.policy, horizon, &mut self.rng);
        for r in out.episode_returns {
            self.window.push_back(r);
            if self.window.len() > crate::ops::EPISODE_WINDOW {
                self.window.pop_front();
            }
        }
        out.batch
    }
}

fn pooled_mean(workers: &[SimWorker]) -> Option<f64> {
    let n: usize = workers.iter().map(|w| w.window.len()).sum();
    let sum: f64 = workers.iter().flat_map(|w| w.window.iter()).sum();
    (n > 0).then(|| sum / n as f64)
}

/// Runs `iterations` iterations of the chosen reference trainer.
pub fn oracle_train(algo: OracleAlgo, cfg: &AlgorithmConfig, iterations: usize) -> Result<OracleRun, RlError> {
    match algo {
        OracleAlgo::A2c => oracle_a2c(cfg, iterations),
        OracleAlgo::QLearning => oracle_q_learning(cfg, iterations),
    }
}

fn oracle_a2c(cfg: &AlgorithmConfig, iterations: usize) -> Result<OracleRun, RlError> {
    let mut policy = Policy::linear_softmax(cfg.n_states);
    let mut workers = sim_workers(cfg, &policy)?;
    let env = ChainEnv::new(cfg.env_spec(), 0)?;
    let min_batch = cfg.effective_min_batch();
    let mut queued: VecDeque<SampleBatch> = VecDeque::new();
    let mut run = OracleRun {
        weights: Vec::with_capacity(iterations),
        records: Vec::with_capacity(iterations),
    };
    let mut steps = 0u64;
    for iter in 1..=iterations {
        let mut pending = Vec::new();
        let mut count = 0;
        while count < min_batch {
            if queued.is_empty() {
                for w in workers.iter_mut() {
                    let b = w.rollout(cfg.horizon);
                    steps += b.count() as u64;
                    queued.push_back(b);
                }
            }
            let b = queued.pop_front().expect("round just generated");
            count += b.count();
            pending.push(b);
        }
        let batch = SampleBatch::concat(&pending)?;
        let g = compute_gradients(&policy, &batch)?;
        policy.weights.apply(&g, cfg.lr)?;
        for w in workers.iter_mut() {
            w.policy.weights = policy.weights.clone();
        }
        run.weights.push(policy.weights.clone());
        run.records.push(OracleRecord {
            iter: iter as u64,
            steps_sampled: steps,
            learner_version: policy.version(),
            mean_episode_reward: pooled_mean(&workers),
            greedy_solved: greedy_solves(&policy, &env),
            store_round: false,
        });
    }
    Ok(run)
}

/// Mirrors the synchronous DQN plan with a single replay buffer: the same
/// weighted schedule alternates storing one rollout round and training on
/// one replayed batch.
fn oracle_q_learning(cfg: &AlgorithmConfig, iterations: usize) -> Result<OracleRun, RlError> {
    let mut learner = Policy::epsilon_greedy_q(cfg.n_states, 0.0);
    let mut workers = sim_workers(cfg, &Policy::epsilon_greedy_q(cfg.n_states, cfg.epsilon))?;
    let env = ChainEnv::new(cfg.env_spec(), 0)?;
    let mut buffer = PrioritizedReplayBuffer::with_params(cfg.buffer_capacity, cfg.replay_alpha, cfg.replay_beta)?;
    let mut replay_rng = ChaCha8Rng::seed_from_u64(replay_rng_seed(cfg.seed, 0));
    let mut schedule = WeightedRoundRobin::new(&cfg.union_weights).map_err(|e| RlError::Config(e.to_string()))?;
    let mut run = OracleRun {
        weights: Vec::with_capacity(iterations),
        records: Vec::with_capacity(iterations),
    };
    let mut steps = 0u64;
    for iter in 1..=iterations {
        let store_round = schedule.next_index() == 0;
        if store_round {
            let round: Vec<SampleBatch> = workers.iter_mut().map(|w| w.rollout(cfg.horizon)).collect();
            let batch = SampleBatch::concat(&round)?;
            steps += batch.count() as u64;
            buffer.add(&batch)?;
        } else {
            let sampled = buffer.sample(cfg.train_batch_size, &mut replay_rng)?;
            let (g, td) = td_gradients(&learner, &sampled.batch, cfg.gamma, Some(&sampled.weights))?;
            learner.weights.apply(&g, cfg.lr)?;
            let priorities: Vec<f64> = td.iter().map(|d| d.abs() + PRIORITY_EPSILON).collect();
            buffer.update_priorities(&sampled.ids, &priorities)?;
            for w in workers.iter_mut() {
                w.policy.weights = learner.weights.clone();
            }
        }
        run.weights.push(learner.weights.clone());
        run.records.push(OracleRecord {
            iter: iter as u64,
            steps_sampled: steps,
            learner_version: learner.version(),
            mean_episode_reward: pooled_mean(&workers),
            greedy_solved: greedy_solves(&learner, &env),
            store_round,
        });
    }
    Ok(run)
}

/// First iteration at which `done` holds for the record, if any.
pub fn first_iteration(run: &OracleRun, done: impl Fn(&OracleRecord) -> bool) -> Option<u64> {
    run.records.iter().find(|r| done(r)).map(|r| r.iter)
}
