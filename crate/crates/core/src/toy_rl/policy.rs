use rand::Rng;
use serde::{Deserialize, Serialize};

use super::batch::SampleBatch;
use super::env::{ChainEnv, NUM_ACTIONS, RIGHT};
use super::RlError;

/// Flat parameter vector plus the learner update count that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyWeights {
    pub values: Vec<f64>,
    pub version: u64,
}

impl PolicyWeights {
    pub fn zeros(dim: usize) -> Self {
        PolicyWeights {
            values: vec![0.0; dim],
            version: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// Gradient ascent step `w += lr * g`; bumps the version.
    pub fn apply(&mut self, grads: &Gradients, lr: f64) -> Result<(), RlError> {
        if grads.values.len() != self.values.len() {
            return Err(RlError::Shape(format!(
                "gradient has {} entries, weights have {}",
                grads.values.len(),
                self.values.len()
            )));
        }
        for (w, g) in self.values.iter_mut().zip(&grads.values) {
            *w += lr * g;
        }
        self.version += 1;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gradients {
    pub values: Vec<f64>,
    /// Version of the weights the gradient was computed against.
    pub source_version: u64,
    /// Number of steps averaged into `values`.
    pub count: usize,
}

impl Gradients {
    /// Count-weighted mean of several gradients of equal dimension.
    pub fn weighted_mean(parts: &[Gradients]) -> Result<Gradients, RlError> {
        let first = parts.first().ok_or_else(|| RlError::Shape("no gradients to combine".into()))?;
        let dim = first.values.len();
        let total: usize = parts.iter().map(|g| g.count).sum();
        if total == 0 {
            return Err(RlError::Shape("gradients cover zero steps".into()));
        }
        let mut values = vec![0.0; dim];
        for g in parts {
            if g.values.len() != dim {
                return Err(RlError::Shape(format!("gradient dims {} vs {dim}", g.values.len())));
            }
            for (acc, v) in values.iter_mut().zip(&g.values) {
                *acc += v * g.count as f64;
            }
        }
        for v in &mut values {
            *v /= total as f64;
        }
        Ok(Gradients {
            values,
            source_version: parts.iter().map(|g| g.source_version).min().unwrap_or(0),
            count: total,
        })
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PolicyKind {
    /// Softmax over `n_actions` logits, each linear in the observation.
    LinearSoftmax,
    /// Linear action values acted on epsilon-greedily, ties broken at random.
    EpsilonGreedyQ { epsilon: f64 },
    /// A single trainable scalar: P(right) = sigmoid(theta).
    Dummy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub kind: PolicyKind,
    pub obs_dim: usize,
    pub n_actions: usize,
    pub weights: PolicyWeights,
}

impl Policy {
    pub fn linear_softmax(obs_dim: usize) -> Self {
        Self::with_kind(PolicyKind::LinearSoftmax, obs_dim)
    }

    pub fn epsilon_greedy_q(obs_dim: usize, epsilon: f64) -> Self {
        Self::with_kind(PolicyKind::EpsilonGreedyQ { epsilon }, obs_dim)
    }

    pub fn dummy() -> Self {
        Policy {
            kind: PolicyKind::Dummy,
            obs_dim: 0,
            n_actions: NUM_ACTIONS,
            weights: PolicyWeights::zeros(1),
        }
    }

    fn with_kind(kind: PolicyKind, obs_dim: usize) -> Self {
        Policy {
            kind,
            obs_dim,
            n_actions: NUM_ACTIONS,
            weights: PolicyWeights::zeros(obs_dim * NUM_ACTIONS),
        }
    }

    pub fn num_params(&self) -> usize {
        self.weights.dim()
    }

    pub fn version(&self) -> u64 {
        self.weights.version
    }

    /// Replaces the weights, checking the dimension.
    pub fn set_weights(&mut self, weights: PolicyWeights) -> Result<(), RlError> {
        if weights.dim() != self.weights.dim() {
            return Err(RlError::Shape(format!(
                "weights have {} entries, policy expects {}",
                weights.dim(),
                self.weights.dim()
            )));
        }
        self.weights = weights;
        Ok(())
    }

    /// Linear scores `W obs`, one per action.
    pub fn scores(&self, obs: &[f64]) -> Vec<f64> {
        let d = self.obs_dim;
        (0..self.n_actions)
            .map(|a| {
                self.weights.values[a * d..(a + 1) * d]
                    .iter()
                    .zip(obs)
                    .map(|(w, x)| w * x)
                    .sum()
            })
            .collect()
    }

    pub fn action_probs(&self, obs: &[f64]) -> Vec<f64> {
        match self.kind {
            PolicyKind::LinearSoftmax => softmax(&self.scores(obs)),
            PolicyKind::Dummy => {
                let p = sigmoid(self.weights.values[0]);
                vec![1.0 - p, p]
            }
            PolicyKind::EpsilonGreedyQ { epsilon } => {
                let q = self.scores(obs);
                let best = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let ties = q.iter().filter(|&&v| v == best).count() as f64;
                let explore = epsilon / self.n_actions as f64;
                q.iter()
                    .map(|&v| explore + if v == best { (1.0 - epsilon) / ties } else { 0.0 })
                    .collect()
            }
        }
    }

    pub fn sample_action<R: Rng>(&self, obs: &[f64], rng: &mut R) -> usize {
        let probs = self.action_probs(obs);
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (a, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return a;
            }
        }
        probs.len() - 1
    }

    /// Greedy action: highest score, ties to the lowest index.
    pub fn greedy_action(&self, obs: &[f64]) -> usize {
        let values = match self.kind {
            PolicyKind::Dummy => self.action_probs(obs),
            _ => self.scores(obs),
        };
        let mut best = 0;
        for (a, v) in values.iter().enumerate() {
            if *v > values[best] {
                best = a;
            }
        }
        best
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Result of running a policy for a fixed number of steps.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub batch: SampleBatch,
    /// Undiscounted returns of the episodes that finished during the rollout.
    pub episode_returns: Vec<f64>,
}

/// Keeps an environment together with the return of its running episode, so
/// consecutive rollouts continue where the previous one stopped.
#[derive(Debug, Clone)]
pub struct EpisodeRunner {
    pub env: ChainEnv,
    partial_return: f64,
}

impl EpisodeRunner {
    pub fn new(mut env: ChainEnv) -> Self {
        env.reset();
        EpisodeRunner {
            env,
            partial_return: 0.0,
        }
    }

    /// Exactly `horizon` steps; episodes that end are reset in place.
    pub fn rollout<R: Rng>(&mut self, policy: &Policy, horizon: usize, rng: &mut R) -> Rollout {
        self.rollout_stamped(policy, horizon, rng, 0)
    }

    pub fn rollout_stamped<R: Rng>(&mut self, policy: &Policy, horizon: usize, rng: &mut R, adaptation: u32) -> Rollout {
        let mut batch = SampleBatch::builder(policy.version(), adaptation);
        let mut episode_returns = Vec::new();
        for _ in 0..horizon.max(1) {
            let obs = self.env.observe();
            let action = policy.sample_action(&obs, rng);
            let step = self.env.step(action);
            self.partial_return += step.reward;
            batch.push(obs, action, step.reward, step.done, step.obs);
            if step.done {
                episode_returns.push(self.partial_return);
                self.partial_return = 0.0;
                self.env.reset();
            }
        }
        if let (Some(false), Some(last)) = (batch.dones.last().copied(), batch.truncated.last_mut()) {
            *last = true;
        }
        Rollout { batch, episode_returns }
    }
}

/// Runs `policy` from a fresh environment for `horizon` steps.
pub fn rollout<R: Rng>(env: ChainEnv, policy: &Policy, horizon: usize, rng: &mut R) -> SampleBatch {
    EpisodeRunner::new(env).rollout(policy, horizon, rng).batch
}

fn check_obs_dim(policy: &Policy, batch: &SampleBatch) -> Result<(), RlError> {
    batch.validate()?;
    if policy.kind != PolicyKind::Dummy {
        if let Some(bad) = batch.obs.iter().find(|o| o.len() != policy.obs_dim) {
            return Err(RlError::Shape(format!(
                "observation has {} features, policy expects {}",
                bad.len(),
                policy.obs_dim
            )));
        }
    }
    if let Some(&a) = batch.actions.iter().find(|&&a| a >= policy.n_actions) {
        return Err(RlError::Shape(format!("action {a} out of range")));
    }
    Ok(())
}

/// Score-function gradient `mean_t grad log pi(a_t|s_t) * G_t` with
/// undiscounted reward-to-go `G_t`.
pub fn compute_gradients(policy: &Policy, batch: &SampleBatch) -> Result<Gradients, RlError> {
    check_obs_dim(policy, batch)?;
    let returns = batch.returns_to_go();
    let n = batch.count();
    let mut values = vec![0.0; policy.num_params()];
    match policy.kind {
        PolicyKind::LinearSoftmax => {
            let d = policy.obs_dim;
            for t in 0..n {
                let g = returns[t];
                if g == 0.0 {
                    continue;
                }
                let obs = &batch.obs[t];
                let probs = policy.action_probs(obs);
                for (a, p) in probs.iter().enumerate() {
                    let coeff = (if a == batch.actions[t] { 1.0 } else { 0.0 } - p) * g;
                    for (j, x) in obs.iter().enumerate() {
                        values[a * d + j] += coeff * x;
                    }
                }
            }
        }
        PolicyKind::Dummy => {
            let p = sigmoid(policy.weights.values[0]);
            for t in 0..n {
                let taken = if batch.actions[t] == RIGHT { 1.0 } else { 0.0 };
                values[0] += (taken - p) * returns[t];
            }
        }
        PolicyKind::EpsilonGreedyQ { .. } => {
            return Err(RlError::Shape(
                "score-function gradients need a stochastic policy; use td_gradients for action values".into(),
            ))
        }
    }
    for v in &mut values {
        *v /= n as f64;
    }
    Ok(Gradients {
        values,
        source_version: policy.version(),
        count: n,
    })
}

/// One-step Q-learning semi-gradient. Returns the gradient of
/// `mean_t w_t * delta_t * Q(s_t, a_t)` with respect to the weights, where
/// `delta_t = r_t + gamma * max_a Q(s'_t, a) * (1 - done_t) - Q(s_t, a_t)`,
/// together with the TD errors.
pub fn td_gradients(
    policy: &Policy,
    batch: &SampleBatch,
    gamma: f64,
    importance: Option<&[f64]>,
) -> Result<(Gradients, Vec<f64>), RlError> {
    check_obs_dim(policy, batch)?;
    if !matches!(policy.kind, PolicyKind::EpsilonGreedyQ { .. }) {
        return Err(RlError::Shape("td_gradients needs an action-value policy".into()));
    }
    let n = batch.count();
    if let Some(w) = importance {
        if w.len() != n {
            return Err(RlError::Shape(format!("{} importance weights for {n} steps", w.len())));
        }
    }
    let d = policy.obs_dim;
    let mut values = vec![0.0; policy.num_params()];
    let mut td = Vec::with_capacity(n);
    for t in 0..n {
        let q = policy.scores(&batch.obs[t]);
        let bootstrap = if batch.dones[t] {
            0.0
        } else {
            policy
                .scores(&batch.next_obs[t])
                .into_iter()
                .fold(f64::NEG_INFINITY, f64::max)
        };
        let delta = batch.rewards[t] + gamma * bootstrap - q[batch.actions[t]];
        td.push(delta);
        let w = importance.map_or(1.0, |w| w[t]);
        let a = batch.actions[t];
        for (j, x) in batch.obs[t].iter().enumerate() {
            values[a * d + j] += w * delta * x;
        }
    }
    for v in &mut values {
        *v /= n as f64;
    }
    Ok((
        Gradients {
            values,
            source_version: policy.version(),
            count: n,
        },
        td,
    ))
}

/// True when greedy play from the start cell reaches the end of the chain
/// along the shortest path.
pub fn greedy_solves(policy: &Policy, env: &ChainEnv) -> bool {
    let mut env = env.clone();
    let mut obs = env.reset();
    let shortest = env.spec().n_states - 1;
    for _ in 0..shortest {
        let step = env.step(policy.greedy_action(&obs));
        if step.reward > 0.0 {
            return true;
        }
        obs = step.obs;
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy_rl::env::{ChainSpec, LEFT};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn always_right(n: usize) -> Policy {
        let mut p = Policy::linear_softmax(n);
        for j in 0..n {
            p.weights.values[RIGHT * n + j] = 60.0;
        }
        p
    }

    #[test]
    fn always_right_rollout_on_four_state_chain() {
        let env = ChainEnv::new(ChainSpec::new(4), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = rollout(env, &always_right(4), 3, &mut rng);
        assert_eq!(b.rewards, vec![0.0, 0.0, 1.0]);
        assert_eq!(b.dones, vec![false, false, true]);
        assert_eq!(b.actions, vec![RIGHT; 3]);
    }

    #[test]
    fn horizon_one_gives_single_step() {
        let env = ChainEnv::new(ChainSpec::new(4), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(rollout(env, &Policy::linear_softmax(4), 1, &mut rng).count(), 1);
    }

    #[test]
    fn rollouts_are_deterministic_under_seed() {
        let policy = Policy::linear_softmax(6);
        let run = || {
            let env = ChainEnv::new(ChainSpec::new(6), 3).unwrap();
            rollout(env, &policy, 50, &mut ChaCha8Rng::seed_from_u64(11))
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn zero_return_batch_has_zero_gradient() {
        let env = ChainEnv::new(ChainSpec::new(8), 0).unwrap();
        let mut left = Policy::linear_softmax(8);
        left.weights.values[LEFT * 8] = 60.0;
        let b = rollout(env, &left, 5, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(b.rewards.iter().all(|&r| r == 0.0));
        let g = compute_gradients(&left, &b).unwrap();
        assert!(g.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_errors() {
        let env = ChainEnv::new(ChainSpec::new(4), 0).unwrap();
        let b = rollout(env, &Policy::linear_softmax(4), 4, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(compute_gradients(&Policy::linear_softmax(5), &b), Err(RlError::Shape(_))));
        let mut w = PolicyWeights::zeros(3);
        let g = Gradients {
            values: vec![1.0; 4],
            source_version: 0,
            count: 1,
        };
        assert!(w.apply(&g, 0.1).is_err());
        assert_eq!(w.version, 0);
    }

    #[test]
    fn dummy_policy_has_one_parameter() {
        assert_eq!(Policy::dummy().num_params(), 1);
    }

    #[test]
    fn epsilon_greedy_probabilities() {
        let mut q = Policy::epsilon_greedy_q(3, 0.2);
        assert_eq!(q.action_probs(&[1.0, 0.0, 0.0]), vec![0.5, 0.5]);
        q.weights.values[RIGHT * 3] = 1.0;
        let p = q.action_probs(&[1.0, 0.0, 0.0]);
        assert!((p[RIGHT] - 0.9).abs() < 1e-12 && (p[LEFT] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn td_error_of_terminal_step_is_reward_minus_q() {
        let q = Policy::epsilon_greedy_q(3, 0.0);
        let mut b = SampleBatch::builder(0, 0);
        b.push(vec![0.0, 1.0, 0.0], RIGHT, 1.0, true, vec![0.0, 0.0, 1.0]);
        let (g, td) = td_gradients(&q, &b, 0.9, None).unwrap();
        assert_eq!(td, vec![1.0]);
        assert_eq!(g.values[RIGHT * 3 + 1], 1.0);
    }
}
