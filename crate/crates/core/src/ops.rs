//! Reinforcement learning operators: rollout and replay actors, the learner,
//! and the stream operators that algorithm plans are composed from.

use std::collections::{BTreeMap, VecDeque};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::actor::{wait_all, ActorError, ActorKind, ActorRef, Runtime};
use crate::metrics::{MetricsRecord, Stopwatch};
use crate::pariter::{FlowError, LocalIter, ParIter, StreamError, StreamResult};
use crate::toy_rl::{
    compute_gradients, td_gradients, worker_seed, ChainEnv, ChainSpec, EpisodeRunner, Gradients, MultiAgentBatch,
    Policy, PolicyId, PolicyWeights, PrioritizedReplayBuffer, ReplayStats, RlError, SampleBatch, SampledBatch,
    DEFAULT_POLICY,
};

/// Episodes kept per policy for the sliding mean reward.
pub const EPISODE_WINDOW: usize = 100;
/// Added to |TD error| to form a replay priority.
pub const PRIORITY_EPSILON: f64 = 1e-6;

pub type WorkerRef = ActorRef<RolloutWorker>;
pub type ReplayRef = ActorRef<ReplayActor>;

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

fn rl_err(e: RlError) -> StreamError {
    StreamError::msg(e)
}

/// Seed of the rollout RNG of worker `index`.
pub fn worker_rng_seed(seed: u64, index: usize) -> u64 {
    worker_seed(seed, index)
}

/// Seed of the environment of agent `agent` on worker `index`.
pub fn agent_env_seed(seed: u64, index: usize, agent: usize) -> u64 {
    worker_seed(worker_seed(seed, index), agent + 1)
}

/// Seed of the sampling RNG of replay actor `index`.
pub fn replay_rng_seed(seed: u64, index: usize) -> u64 {
    worker_seed(seed ^ 0x5EED_0F2E_91A7, index)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentSpec {
    pub policy_id: PolicyId,
    pub env: ChainSpec,
}

/// Everything needed to (re)build a rollout worker.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkerSpec {
    pub index: usize,
    pub seed: u64,
    pub horizon: usize,
    pub agents: Vec<AgentSpec>,
    pub policies: BTreeMap<PolicyId, Policy>,
    pub window: usize,
}

impl WorkerSpec {
    /// One agent driven by [`DEFAULT_POLICY`].
    pub fn single(index: usize, seed: u64, horizon: usize, env: ChainSpec, policy: Policy) -> Self {
        WorkerSpec {
            index,
            seed,
            horizon,
            agents: vec![AgentSpec {
                policy_id: DEFAULT_POLICY.to_string(),
                env,
            }],
            policies: BTreeMap::from([(DEFAULT_POLICY.to_string(), policy)]),
            window: EPISODE_WINDOW,
        }
    }

    pub fn validate(&self) -> Result<(), RlError> {
        if self.horizon == 0 {
            return Err(RlError::Config("horizon must be at least 1".into()));
        }
        if self.agents.is_empty() {
            return Err(RlError::Config("a worker needs at least one agent".into()));
        }
        for a in &self.agents {
            a.env.validate()?;
            let policy = self
                .policies
                .get(&a.policy_id)
                .ok_or_else(|| RlError::Config(format!("no policy named {:?}", a.policy_id)))?;
            if policy.kind != crate::toy_rl::PolicyKind::Dummy && policy.obs_dim != a.env.n_states {
                return Err(RlError::Shape(format!(
                    "policy {:?} expects {} features, env has {} states",
                    a.policy_id, policy.obs_dim, a.env.n_states
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
struct EpisodeWindow {
    returns: VecDeque<f64>,
    total: u64,
}

/// Episode statistics of one policy on one worker.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EpisodeStats {
    pub episodes: u64,
    pub window: Vec<f64>,
}

/// Actor state of a rollout worker: environments, local policy copies and
/// episode statistics.
#[derive(Debug)]
pub struct RolloutWorker {
    index: usize,
    horizon: usize,
    window: usize,
    agents: Vec<(PolicyId, EpisodeRunner)>,
    policies: BTreeMap<PolicyId, Policy>,
    rng: ChaCha8Rng,
    episodes: BTreeMap<PolicyId, EpisodeWindow>,
    adaptation: u32,
    last_gradient: Option<Gradients>,
    rollouts: u64,
}

impl RolloutWorker {
    pub fn new(spec: &WorkerSpec) -> Result<Self, RlError> {
        spec.validate()?;
        let mut agents = Vec::with_capacity(spec.agents.len());
        for (j, a) in spec.agents.iter().enumerate() {
            let env = ChainEnv::new(a.env, agent_env_seed(spec.seed, spec.index, j))?;
            agents.push((a.policy_id.clone(), EpisodeRunner::new(env)));
        }
        Ok(RolloutWorker {
            index: spec.index,
            horizon: spec.horizon,
            window: spec.window.max(1),
            agents,
            policies: spec.policies.clone(),
            rng: ChaCha8Rng::seed_from_u64(worker_rng_seed(spec.seed, spec.index)),
            episodes: BTreeMap::new(),
            adaptation: 0,
            last_gradient: None,
            rollouts: 0,
        })
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn rollouts(&self) -> u64 {
        self.rollouts
    }

    pub fn adaptation(&self) -> u32 {
        self.adaptation
    }

    fn run_agent(&mut self, j: usize) -> SampleBatch {
        let (pid, runner) = &mut self.agents[j];
        let policy = &self.policies[pid.as_str()];
        let out = runner.rollout_stamped(policy, self.horizon, &mut self.rng, self.adaptation);
        let w = self.episodes.entry(pid.clone()).or_default();
        for r in out.episode_returns {
            w.total += 1;
            w.returns.push_back(r);
            if w.returns.len() > self.window {
                w.returns.pop_front();
            }
        }
        out.batch
    }

    /// One rollout of `horizon` steps per agent, grouped by policy.
    pub fn sample(&mut self) -> MultiAgentBatch {
        let mut out = MultiAgentBatch::default();
        for j in 0..self.agents.len() {
            let b = self.run_agent(j);
            let pid = self.agents[j].0.clone();
            let merged = match out.policy_batches.remove(&pid) {
                Some(prev) => SampleBatch::concat(&[prev, b]).expect("non-empty batches"),
                None => b,
            };
            out.policy_batches.insert(pid, merged);
        }
        self.rollouts += 1;
        out
    }

    /// Rollout of the first agent only.
    pub fn sample_single(&mut self) -> SampleBatch {
        self.rollouts += 1;
        self.run_agent(0)
    }

    fn primary_policy(&self) -> &str {
        &self.agents[0].0
    }

    pub fn policy(&self, policy_id: &str) -> Option<&Policy> {
        self.policies.get(policy_id)
    }

    pub fn weights(&self, policy_id: &str) -> Option<PolicyWeights> {
        self.policies.get(policy_id).map(|p| p.weights.clone())
    }

    /// Installs learner weights and drops any local adaptation.
    pub fn set_weights(&mut self, policy_id: &str, weights: PolicyWeights) -> Result<(), RlError> {
        let policy = self
            .policies
            .get_mut(policy_id)
            .ok_or_else(|| RlError::Config(format!("worker {} has no policy {policy_id:?}", self.index)))?;
        policy.set_weights(weights)?;
        self.adaptation = 0;
        Ok(())
    }

    /// Gradient of the first agent's policy on `batch`; kept for [`Self::adapt`].
    pub fn compute_gradients(&mut self, batch: &SampleBatch) -> Result<Gradients, RlError> {
        let policy = &self.policies[self.primary_policy()];
        let g = compute_gradients(policy, batch)?;
        self.last_gradient = Some(g.clone());
        Ok(g)
    }

    /// Local gradient step with the last computed gradient. The learner
    /// version is kept; the adaptation counter goes up instead.
    pub fn adapt(&mut self, lr: f64) -> Result<u32, RlError> {
        let g = self
            .last_gradient
            .take()
            .ok_or_else(|| RlError::Config("adapt called before any gradient was computed".into()))?;
        let pid = self.primary_policy().to_string();
        let policy = self.policies.get_mut(&pid).expect("primary policy exists");
        let version = policy.weights.version;
        policy.weights.apply(&g, lr)?;
        policy.weights.version = version;
        self.adaptation += 1;
        Ok(self.adaptation)
    }

    pub fn episode_stats(&self, policy_id: &str) -> EpisodeStats {
        self.episodes
            .get(policy_id)
            .map(|w| EpisodeStats {
                episodes: w.total,
                window: w.returns.iter().copied().collect(),
            })
            .unwrap_or_default()
    }
}

pub fn spawn_workers(rt: &Runtime, specs: Vec<WorkerSpec>) -> Result<Vec<WorkerRef>, ActorError> {
    let mut out = Vec::with_capacity(specs.len());
    for spec in specs {
        spec.validate().map_err(|e| ActorError::Spawn(e.to_string()))?;
        out.push(rt.spawn(ActorKind::RolloutWorker, move || {
            RolloutWorker::new(&spec).expect("validated worker spec")
        })?);
    }
    Ok(out)
}

/// Actor state of a replay shard.
#[derive(Debug)]
pub struct ReplayActor {
    index: usize,
    buffer: PrioritizedReplayBuffer,
    rng: ChaCha8Rng,
    peak_len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReplaySpec {
    pub capacity: usize,
    pub alpha: f64,
    pub beta: f64,
    pub seed: u64,
}

impl ReplayActor {
    pub fn new(index: usize, spec: ReplaySpec) -> Result<Self, RlError> {
        Ok(ReplayActor {
            index,
            buffer: PrioritizedReplayBuffer::with_params(spec.capacity, spec.alpha, spec.beta)?,
            rng: ChaCha8Rng::seed_from_u64(replay_rng_seed(spec.seed, index)),
            peak_len: 0,
        })
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn add(&mut self, batch: &SampleBatch) -> Result<Vec<u64>, RlError> {
        let ids = self.buffer.add(batch)?;
        self.peak_len = self.peak_len.max(self.buffer.len());
        Ok(ids)
    }

    pub fn sample(&mut self, n: usize) -> Result<SampledBatch, RlError> {
        self.buffer.sample(n, &mut self.rng)
    }

    pub fn update_priorities(&mut self, ids: &[u64], priorities: &[f64]) -> Result<usize, RlError> {
        self.buffer.update_priorities(ids, priorities)
    }

    pub fn buffer(&self) -> &PrioritizedReplayBuffer {
        &self.buffer
    }

    /// Largest length the buffer ever reached.
    pub fn peak_len(&self) -> usize {
        self.peak_len
    }

    pub fn stats(&self) -> ReplayStats {
        self.buffer.stats()
    }
}

pub fn spawn_replay_actors(rt: &Runtime, count: usize, spec: ReplaySpec) -> Result<Vec<ReplayRef>, ActorError> {
    PrioritizedReplayBuffer::with_params(spec.capacity, spec.alpha, spec.beta)
        .map_err(|e| ActorError::Spawn(e.to_string()))?;
    (0..count)
        .map(|i| {
            rt.spawn(ActorKind::ReplayActor, move || {
                ReplayActor::new(i, spec).expect("validated replay spec")
            })
        })
        .collect()
}

/// How a learner turns a batch into weight updates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TrainRule {
    /// One score-function gradient step per batch.
    PolicyGradient,
    /// Several passes of score-function steps over shuffled-free contiguous
    /// minibatches (the simplified PPO update; no clipping).
    MinibatchPolicyGradient { minibatch_size: usize, epochs: usize },
    /// One Q-learning step per batch, weighted by replay importance weights.
    QLearning { gamma: f64 },
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainStats {
    pub updates: u64,
    pub grad_norm: f64,
    pub td_errors: Vec<f64>,
}

/// Central copy of a policy plus its update rule.
#[derive(Debug, Clone)]
pub struct Learner {
    pub policy_id: PolicyId,
    pub policy: Policy,
    pub lr: f64,
    pub rule: TrainRule,
}

pub type SharedLearner = Arc<Mutex<Learner>>;

impl Learner {
    pub fn new(policy_id: impl Into<PolicyId>, policy: Policy, lr: f64, rule: TrainRule) -> Self {
        Learner {
            policy_id: policy_id.into(),
            policy,
            lr,
            rule,
        }
    }

    pub fn shared(self) -> SharedLearner {
        Arc::new(Mutex::new(self))
    }

    pub fn weights(&self) -> PolicyWeights {
        self.policy.weights.clone()
    }

    pub fn version(&self) -> u64 {
        self.policy.version()
    }

    pub fn apply(&mut self, grads: &Gradients) -> Result<(), RlError> {
        self.policy.weights.apply(grads, self.lr)
    }

    pub fn train(&mut self, batch: &SampleBatch, importance: Option<&[f64]>) -> Result<TrainStats, RlError> {
        match self.rule {
            TrainRule::PolicyGradient => {
                let g = compute_gradients(&self.policy, batch)?;
                self.apply(&g)?;
                Ok(TrainStats {
                    updates: 1,
                    grad_norm: g.norm(),
                    td_errors: Vec::new(),
                })
            }
            TrainRule::MinibatchPolicyGradient { minibatch_size, epochs } => {
                batch.validate()?;
                let size = minibatch_size.max(1);
                let mut stats = TrainStats::default();
                for _ in 0..epochs.max(1) {
                    let mut start = 0;
                    while start < batch.count() {
                        let end = (start + size).min(batch.count());
                        let g = compute_gradients(&self.policy, &batch.slice(start, end))?;
                        self.apply(&g)?;
                        stats.updates += 1;
                        stats.grad_norm = g.norm();
                        start = end;
                    }
                }
                Ok(stats)
            }
            TrainRule::QLearning { gamma } => {
                let (g, td) = td_gradients(&self.policy, batch, gamma, importance)?;
                self.apply(&g)?;
                Ok(TrainStats {
                    updates: 1,
                    grad_norm: g.norm(),
                    td_errors: td,
                })
            }
        }
    }
}

/// Shared bookkeeping of one running flow.
#[derive(Debug)]
pub struct FlowContext {
    counters: Mutex<Counters>,
    pending: Mutex<BTreeMap<u64, PendingUpdate>>,
    clock: Stopwatch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PendingUpdate {
    pub source: usize,
    pub ids: Vec<u64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Counters {
    pub steps_sampled: u64,
    pub steps_trained: u64,
    pub rollout_batches: u64,
    pub train_rounds: u64,
    pub gradients_applied: u64,
    pub max_staleness: u64,
    pub batches_stored: u64,
    pub store_drops: u64,
    pub replay_batches: u64,
    pub priority_updates: u64,
    pub stale_priority_updates: u64,
    pub priority_update_drops: u64,
    pub broadcasts: u64,
    pub inner_adaptations: u64,
    pub meta_updates: u64,
    pub sampled_by_policy: BTreeMap<PolicyId, u64>,
    pub consumed_by_policy: BTreeMap<PolicyId, u64>,
    next_ticket: u64,
}

impl Default for FlowContext {
    fn default() -> Self {
        FlowContext {
            counters: Mutex::new(Counters::default()),
            pending: Mutex::new(BTreeMap::new()),
            clock: Stopwatch::start(),
        }
    }
}

impl FlowContext {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    pub fn counters(&self) -> Counters {
        lock(&self.counters).clone()
    }

    pub fn update<R>(&self, f: impl FnOnce(&mut Counters) -> R) -> R {
        f(&mut lock(&self.counters))
    }

    pub fn elapsed_secs(&self) -> f64 {
        self.clock.elapsed_secs()
    }

    /// Trained replay batches whose priorities have not been written back.
    pub fn pending_updates(&self) -> Vec<PendingUpdate> {
        lock(&self.pending).values().cloned().collect()
    }

    fn open_ticket(&self, source: usize, ids: Vec<u64>) -> u64 {
        let ticket = self.update(|c| {
            c.next_ticket += 1;
            c.next_ticket
        });
        lock(&self.pending).insert(ticket, PendingUpdate { source, ids });
        ticket
    }

    fn close_ticket(&self, ticket: u64) {
        lock(&self.pending).remove(&ticket);
    }

    fn count_sampled(&self, batches: &[SampleBatch]) {
        self.update(|c| {
            for b in batches {
                c.steps_sampled += b.count() as u64;
                c.rollout_batches += 1;
            }
        });
    }
}

/// Rollouts of every worker, one list per barriered round, in worker order.
pub fn bulk_sync_rollouts(workers: &[WorkerRef], ctx: &Arc<FlowContext>) -> Result<LocalIter<Vec<SampleBatch>>, FlowError> {
    let ctx = Arc::clone(ctx);
    Ok(ParIter::from_actors(workers.to_vec(), |w: &mut RolloutWorker| w.sample_single())?
        .gather_sync()
        .for_each(move |round| {
            ctx.count_sampled(&round);
            round
        }))
}

/// Multi-agent rollouts of every worker per barriered round.
pub fn bulk_sync_multi_agent(
    workers: &[WorkerRef],
    ctx: &Arc<FlowContext>,
) -> Result<LocalIter<Vec<MultiAgentBatch>>, FlowError> {
    let ctx = Arc::clone(ctx);
    Ok(ParIter::from_actors(workers.to_vec(), |w: &mut RolloutWorker| w.sample())?
        .gather_sync()
        .for_each(move |round: Vec<MultiAgentBatch>| {
            ctx.update(|c| {
                for mb in &round {
                    c.rollout_batches += 1;
                    for (pid, b) in &mb.policy_batches {
                        c.steps_sampled += b.count() as u64;
                        *c.sampled_by_policy.entry(pid.clone()).or_default() += b.count() as u64;
                    }
                }
            });
            round
        }))
}

/// Rollouts in completion order with up to `num_async` pending per worker.
pub fn async_rollouts(
    workers: &[WorkerRef],
    num_async: usize,
    ctx: &Arc<FlowContext>,
) -> Result<LocalIter<SampleBatch>, FlowError> {
    let ctx = Arc::clone(ctx);
    Ok(ParIter::from_actors(workers.to_vec(), |w: &mut RolloutWorker| w.sample_single())?
        .gather_async(num_async)?
        .for_each(move |b| {
            ctx.count_sampled(std::slice::from_ref(&b));
            b
        }))
}

/// A gradient computed on a rollout worker from its own batch.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkerGradients {
    pub worker_index: usize,
    pub grads: Gradients,
    pub steps: usize,
    pub batch_version: u64,
    pub adaptation: u32,
}

/// Rollout followed by a gradient computation, both on the worker.
pub fn worker_gradients(workers: &[WorkerRef]) -> Result<ParIter<RolloutWorker, WorkerGradients>, FlowError> {
    Ok(
        ParIter::from_actors(workers.to_vec(), |w: &mut RolloutWorker| w.sample_single())?.try_for_each_on_actor(
            |w: &mut RolloutWorker, batch: SampleBatch| {
                let grads = w.compute_gradients(&batch).map_err(rl_err)?;
                Ok(WorkerGradients {
                    worker_index: w.index(),
                    grads,
                    steps: batch.count(),
                    batch_version: batch.policy_version,
                    adaptation: batch.adaptation,
                })
            },
        ),
    )
}

/// Flattens rounds into their batches, keeping order.
pub fn flatten_rounds<T: Send + 'static>(it: LocalIter<Vec<T>>) -> LocalIter<T> {
    it.flat_map(Ok)
}

/// Concatenates consecutive batches until at least `min_batch_size` steps
/// are collected. A shorter remainder is emitted when the input ends.
pub fn concat_batches(it: LocalIter<SampleBatch>, min_batch_size: usize) -> Result<LocalIter<SampleBatch>, FlowError> {
    if min_batch_size == 0 {
        return Err(FlowError::InvalidArgument("min_batch_size must be at least 1".into()));
    }
    let mut it = it;
    let mut buffer: Vec<SampleBatch> = Vec::new();
    let mut count = 0usize;
    Ok(LocalIter::from_pull(crate::pariter::Provenance::Transform, move || loop {
        match it.next() {
            Some(Ok(b)) => {
                count += b.count();
                buffer.push(b);
                if count >= min_batch_size {
                    count = 0;
                    return Some(SampleBatch::concat(&std::mem::take(&mut buffer)).map_err(rl_err));
                }
            }
            Some(Err(e)) => return Some(Err(e)),
            None if buffer.is_empty() => return None,
            None => {
                count = 0;
                return Some(SampleBatch::concat(&std::mem::take(&mut buffer)).map_err(rl_err));
            }
        }
    }))
}

/// Which rollout workers receive learner weights, and how often.
#[derive(Debug, Clone)]
pub struct Broadcast {
    pub workers: Vec<WorkerRef>,
    pub policy_id: PolicyId,
    /// Broadcast after every `interval`-th training round.
    pub interval: u64,
}

impl Broadcast {
    pub fn none() -> Self {
        Broadcast {
            workers: Vec::new(),
            policy_id: DEFAULT_POLICY.into(),
            interval: 1,
        }
    }

    pub fn every_step(workers: &[WorkerRef], policy_id: &str) -> Self {
        Self::every(workers, policy_id, 1)
    }

    pub fn every(workers: &[WorkerRef], policy_id: &str, interval: u64) -> Self {
        Broadcast {
            workers: workers.to_vec(),
            policy_id: policy_id.into(),
            interval: interval.max(1),
        }
    }
}

/// Sends `weights` to every worker and waits for all of them to install it.
pub fn broadcast_weights(workers: &[WorkerRef], policy_id: &str, weights: &PolicyWeights) -> StreamResult<()> {
    let handles: Vec<_> = workers
        .iter()
        .map(|w| {
            let weights = weights.clone();
            let pid = policy_id.to_string();
            w.latest().call("set_weights", move |s: &mut RolloutWorker| s.set_weights(&pid, weights))
        })
        .collect();
    for r in wait_all(handles)? {
        r.map_err(rl_err)?;
    }
    Ok(())
}

/// What a round of the flow did.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoundKind {
    Sample,
    Train,
}

/// A trained replay batch, kept until its priorities are written back.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayTicket {
    pub source: usize,
    pub ids: Vec<u64>,
    pub td_errors: Vec<f64>,
    ticket: u64,
}

/// Item flowing out of sampling and training operators.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainResult {
    pub kind: RoundKind,
    pub policy_id: PolicyId,
    pub record: MetricsRecord,
    pub replay: Option<ReplayTicket>,
}

impl TrainResult {
    pub fn sample(policy_id: &str, steps: usize) -> Self {
        let mut record = MetricsRecord::default();
        record.set_extra("round_steps", steps as f64);
        TrainResult {
            kind: RoundKind::Sample,
            policy_id: policy_id.into(),
            record,
            replay: None,
        }
    }
}

/// A batch a learner can train on.
pub trait TrainInput: Send + 'static {
    fn batch(&self) -> &SampleBatch;

    fn importance(&self) -> Option<&[f64]> {
        None
    }

    /// Replay actor index and ids the batch was drawn from.
    fn replay_source(&self) -> Option<(usize, &[u64])> {
        None
    }
}

impl TrainInput for SampleBatch {
    fn batch(&self) -> &SampleBatch {
        self
    }
}

/// Sampled rows plus the index of the replay actor they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayedBatch {
    pub source: usize,
    pub sampled: SampledBatch,
}

impl TrainInput for ReplayedBatch {
    fn batch(&self) -> &SampleBatch {
        &self.sampled.batch
    }

    fn importance(&self) -> Option<&[f64]> {
        Some(&self.sampled.weights)
    }

    fn replay_source(&self) -> Option<(usize, &[u64])> {
        Some((self.source, &self.sampled.ids))
    }
}

/// Trains the learner on each input and, when the broadcast interval is
/// reached, pushes the new weights to the broadcast workers and waits for
/// them before yielding the round's result.
pub fn train_one_step<I: TrainInput>(
    it: LocalIter<I>,
    learner: SharedLearner,
    broadcast: Broadcast,
    ctx: &Arc<FlowContext>,
) -> LocalIter<TrainResult> {
    let ctx = Arc::clone(ctx);
    let mut rounds = 0u64;
    it.try_for_each(move |input| {
        let batch = input.batch();
        let (stats, weights, version, policy_id) = {
            let mut l = lock(&learner);
            let stats = l.train(batch, input.importance()).map_err(rl_err)?;
            (stats, l.weights(), l.version(), l.policy_id.clone())
        };
        rounds += 1;
        let steps = batch.count() as u64;
        ctx.update(|c| {
            c.steps_trained += steps;
            c.train_rounds += 1;
        });
        if !broadcast.workers.is_empty() && rounds.is_multiple_of(broadcast.interval) {
            broadcast_weights(&broadcast.workers, &broadcast.policy_id, &weights)?;
            ctx.update(|c| c.broadcasts += 1);
        }
        let mut record = MetricsRecord {
            learner_version: version,
            ..Default::default()
        };
        record.set_extra("train_batch_steps", steps as f64);
        record.set_extra("grad_norm", stats.grad_norm);
        record.set_extra("batch_policy_version", batch.policy_version as f64);
        let replay = input.replay_source().map(|(source, ids)| {
            let ticket = ctx.open_ticket(source, ids.to_vec());
            ReplayTicket {
                source,
                ids: ids.to_vec(),
                td_errors: stats.td_errors.clone(),
                ticket,
            }
        });
        if !stats.td_errors.is_empty() {
            let mean_abs = stats.td_errors.iter().map(|d| d.abs()).sum::<f64>() / stats.td_errors.len() as f64;
            record.set_extra("mean_abs_td_error", mean_abs);
        }
        Ok(TrainResult {
            kind: RoundKind::Train,
            policy_id,
            record,
            replay,
        })
    })
}

/// Applies worker gradients as they arrive. With `update_origin`, the new
/// weights are sent back to the worker that produced the gradient (without
/// waiting), so its next rollout uses them. Staleness is recorded, never
/// rejected.
pub fn apply_gradients_op(
    it: LocalIter<WorkerGradients>,
    learner: SharedLearner,
    workers: &[WorkerRef],
    update_origin: bool,
    ctx: &Arc<FlowContext>,
) -> LocalIter<TrainResult> {
    let ctx = Arc::clone(ctx);
    let workers = workers.to_vec();
    it.try_for_each(move |wg| {
        let (weights, policy_id, staleness) = {
            let mut l = lock(&learner);
            let staleness = l.version().saturating_sub(wg.grads.source_version);
            l.apply(&wg.grads).map_err(rl_err)?;
            (l.weights(), l.policy_id.clone(), staleness)
        };
        let version = weights.version;
        ctx.update(|c| {
            c.gradients_applied += 1;
            c.steps_sampled += wg.steps as u64;
            c.steps_trained += wg.steps as u64;
            c.rollout_batches += 1;
            c.max_staleness = c.max_staleness.max(staleness);
        });
        if update_origin {
            if let Some(w) = workers.get(wg.worker_index) {
                let pid = policy_id.clone();
                drop(w.latest().call("set_weights", move |s: &mut RolloutWorker| s.set_weights(&pid, weights)));
            }
        }
        let mut record = MetricsRecord {
            learner_version: version,
            ..Default::default()
        };
        record.set_extra("staleness", staleness as f64);
        record.set_extra("origin_worker", wg.worker_index as f64);
        Ok(TrainResult {
            kind: RoundKind::Train,
            policy_id,
            record,
            replay: None,
        })
    })
}

/// Sends each batch to one replay actor, round-robin, and passes it on.
/// A failed delivery drops the batch and is counted.
pub fn store_to_replay(
    it: LocalIter<SampleBatch>,
    replay_actors: &[ReplayRef],
    ctx: &Arc<FlowContext>,
) -> Result<LocalIter<SampleBatch>, FlowError> {
    if replay_actors.is_empty() {
        return Err(FlowError::EmptySource);
    }
    let actors = replay_actors.to_vec();
    let ctx = Arc::clone(ctx);
    let mut next = 0usize;
    Ok(it.for_each(move |batch| {
        let target = &actors[next % actors.len()];
        next += 1;
        let b = batch.clone();
        match target.latest().ask("add", move |r: &mut ReplayActor| r.add(&b)) {
            Ok(Ok(_)) => ctx.update(|c| c.batches_stored += 1),
            _ => ctx.update(|c| c.store_drops += 1),
        }
        batch
    }))
}

/// Endless stream of `train_batch_size`-row samples drawn round-robin from
/// the replay actors. While every buffer is empty it polls every `poll`.
pub fn replay_op(
    replay_actors: &[ReplayRef],
    train_batch_size: usize,
    poll: Duration,
    ctx: &Arc<FlowContext>,
) -> Result<LocalIter<ReplayedBatch>, FlowError> {
    if replay_actors.is_empty() {
        return Err(FlowError::EmptySource);
    }
    if train_batch_size == 0 {
        return Err(FlowError::InvalidArgument("train_batch_size must be at least 1".into()));
    }
    let actors = replay_actors.to_vec();
    let ctx = Arc::clone(ctx);
    let mut next = 0usize;
    Ok(LocalIter::from_pull(crate::pariter::Provenance::Source, move || loop {
        for _ in 0..actors.len() {
            let source = next % actors.len();
            next += 1;
            match actors[source]
                .latest()
                .ask("sample", move |r: &mut ReplayActor| r.sample(train_batch_size))
            {
                Ok(Ok(sampled)) => {
                    ctx.update(|c| c.replay_batches += 1);
                    return Some(Ok(ReplayedBatch { source, sampled }));
                }
                Ok(Err(RlError::EmptyBuffer)) => continue,
                Ok(Err(e)) => return Some(Err(rl_err(e))),
                Err(e) => return Some(Err(e.into())),
            }
        }
        thread::sleep(poll);
    }))
}

/// Writes `|td| + PRIORITY_EPSILON` back to the replay actor a trained batch
/// came from, and waits for it. Lost updates are counted, not fatal.
pub fn update_priorities_op(
    it: LocalIter<TrainResult>,
    replay_actors: &[ReplayRef],
    ctx: &Arc<FlowContext>,
) -> LocalIter<TrainResult> {
    let actors = replay_actors.to_vec();
    let ctx = Arc::clone(ctx);
    it.for_each(move |mut result| {
        if let Some(t) = &result.replay {
            let ids = t.ids.clone();
            let priorities: Vec<f64> = t.td_errors.iter().map(|d| d.abs() + PRIORITY_EPSILON).collect();
            let sent = ids.len() as u64;
            let reply = actors.get(t.source).map(|a| {
                a.latest()
                    .ask("update_priorities", move |r: &mut ReplayActor| r.update_priorities(&ids, &priorities))
            });
            match reply {
                Some(Ok(Ok(applied))) => {
                    ctx.update(|c| {
                        c.priority_updates += applied as u64;
                        c.stale_priority_updates += sent - applied as u64;
                    });
                    result.record.set_extra("priority_updates", applied as f64);
                }
                _ => ctx.update(|c| c.priority_update_drops += 1),
            }
            ctx.close_ticket(t.ticket);
        }
        result
    })
}

/// Sends `adapt(lr)` to every worker and waits for all of them.
pub fn inner_adapt(workers: &[WorkerRef], lr: f64, ctx: &Arc<FlowContext>) -> StreamResult<()> {
    let handles: Vec<_> = workers
        .iter()
        .map(|w| w.latest().call("adapt", move |s: &mut RolloutWorker| s.adapt(lr)))
        .collect();
    for r in wait_all(handles)? {
        r.map_err(rl_err)?;
    }
    ctx.update(|c| c.inner_adaptations += workers.len() as u64);
    Ok(())
}

/// Groups rounds of worker gradients into meta-rounds: the first
/// `inner_steps` rounds of each group trigger a local adaptation on every
/// worker; the last round's gradients (taken at the adapted weights) are
/// averaged, weighted by step count, applied to the learner and broadcast.
/// Emits one result per meta-round.
pub fn meta_update(
    rounds: LocalIter<Vec<WorkerGradients>>,
    learner: SharedLearner,
    workers: &[WorkerRef],
    inner_steps: usize,
    inner_lr: f64,
    ctx: &Arc<FlowContext>,
) -> LocalIter<TrainResult> {
    let workers = workers.to_vec();
    let ctx = Arc::clone(ctx);
    let mut phase = 0usize;
    rounds.flat_map(move |round| {
        let steps: u64 = round.iter().map(|g| g.steps as u64).sum();
        ctx.update(|c| {
            c.steps_sampled += steps;
            c.rollout_batches += round.len() as u64;
        });
        if phase < inner_steps {
            phase += 1;
            inner_adapt(&workers, inner_lr, &ctx)?;
            return Ok(Vec::new());
        }
        phase = 0;
        let parts: Vec<Gradients> = round.iter().map(|g| g.grads.clone()).collect();
        let meta = Gradients::weighted_mean(&parts).map_err(rl_err)?;
        let (weights, version, policy_id) = {
            let mut l = lock(&learner);
            l.apply(&meta).map_err(rl_err)?;
            (l.weights(), l.version(), l.policy_id.clone())
        };
        broadcast_weights(&workers, &policy_id, &weights)?;
        ctx.update(|c| {
            c.steps_trained += steps;
            c.meta_updates += 1;
            c.broadcasts += 1;
        });
        let mut record = MetricsRecord {
            learner_version: version,
            ..Default::default()
        };
        record.set_extra("grad_norm", meta.norm());
        record.set_extra("post_adaptation", round.iter().map(|g| g.adaptation).min().unwrap_or(0) as f64);
        Ok(vec![TrainResult {
            kind: RoundKind::Train,
            policy_id,
            record,
            replay: None,
        }])
    })
}

/// Fills in counters, timing and episode rewards. Worker statistics are
/// polled at most once per `min_poll_interval` (in seconds); in between the
/// last polled value is reused.
pub fn collect_metrics(
    it: LocalIter<TrainResult>,
    workers: &[WorkerRef],
    ctx: &Arc<FlowContext>,
    min_poll_interval: f64,
) -> LocalIter<MetricsRecord> {
    let workers = workers.to_vec();
    let ctx = Arc::clone(ctx);
    let mut iter = 0u64;
    let mut last_poll: BTreeMap<PolicyId, (f64, Option<f64>, u64)> = BTreeMap::new();
    let mut versions: BTreeMap<PolicyId, u64> = BTreeMap::new();
    it.for_each(move |result| {
        iter += 1;
        let c = ctx.counters();
        let now = ctx.elapsed_secs();
        let mut r = result.record;
        r.iter = iter;
        r.wall_time_s = now;
        r.steps_sampled = c.steps_sampled;
        r.steps_trained = c.steps_trained;
        r.throughput_steps_per_s = if now > 0.0 { c.steps_sampled as f64 / now } else { 0.0 };
        let stale = last_poll
            .get(&result.policy_id)
            .is_none_or(|(t, _, _)| now - t >= min_poll_interval);
        if stale {
            let (mean, episodes) = poll_episode_stats(&workers, &result.policy_id);
            last_poll.insert(result.policy_id.clone(), (now, mean, episodes));
        }
        let (_, mean, episodes) = last_poll[&result.policy_id];
        r.mean_episode_reward = mean;
        r.set_extra("episodes_total", episodes as f64);
        // Sample records carry no learner version of their own.
        let version = versions.entry(result.policy_id.clone()).or_default();
        *version = (*version).max(r.learner_version);
        r.learner_version = *version;
        if result.kind == RoundKind::Sample {
            r.set_extra("sample_round", 1.0);
        }
        r
    })
}

/// Mean over the pooled reward windows of every reachable worker, and the
/// total episode count. Unreachable workers are skipped.
pub fn poll_episode_stats(workers: &[WorkerRef], policy_id: &str) -> (Option<f64>, u64) {
    let handles: Vec<_> = workers
        .iter()
        .map(|w| {
            let pid = policy_id.to_string();
            w.latest().call("episode_stats", move |s: &mut RolloutWorker| s.episode_stats(&pid))
        })
        .collect();
    let mut sum = 0.0;
    let mut n = 0usize;
    let mut episodes = 0;
    for h in handles {
        if let Ok(stats) = h.into_result() {
            episodes += stats.episodes;
            n += stats.window.len();
            sum += stats.window.iter().sum::<f64>();
        }
    }
    ((n > 0).then(|| sum / n as f64), episodes)
}

/// Pauses a training loop while held.
#[derive(Debug, Default)]
pub struct TrainerGate {
    held: Mutex<bool>,
    changed: Condvar,
}

impl TrainerGate {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    pub fn hold(&self) {
        *lock(&self.held) = true;
    }

    pub fn release(&self) {
        *lock(&self.held) = false;
        self.changed.notify_all();
    }

    pub fn is_held(&self) -> bool {
        *lock(&self.held)
    }

    /// Blocks while the gate is held.
    pub fn pass(&self) {
        let mut held = lock(&self.held);
        while *held {
            held = self.changed.wait(held).unwrap_or_else(|p| p.into_inner());
        }
    }
}

/// Stream that waits at `gate` before each pull of `it`.
pub fn gated<T: Send + 'static>(it: LocalIter<T>, gate: Arc<TrainerGate>) -> LocalIter<T> {
    let mut it = it;
    LocalIter::from_pull(crate::pariter::Provenance::Transform, move || {
        gate.pass();
        it.next()
    })
}

/// Per-policy selection of multi-agent rounds; counts consumed steps.
/// Rounds are shared so that several consumers of one round (after a split)
/// do not copy it.
pub fn select_policy(
    it: LocalIter<Arc<Vec<MultiAgentBatch>>>,
    policy_id: &str,
    ctx: &Arc<FlowContext>,
) -> LocalIter<Vec<SampleBatch>> {
    let pid = policy_id.to_string();
    let ctx = Arc::clone(ctx);
    it.for_each(move |round| {
        let picked: Vec<SampleBatch> = round.iter().filter_map(|mb| mb.select(&pid).cloned()).collect();
        let steps: u64 = picked.iter().map(|b| b.count() as u64).sum();
        ctx.update(|c| *c.consumed_by_policy.entry(pid.clone()).or_default() += steps);
        picked
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(index: usize) -> WorkerSpec {
        WorkerSpec::single(index, 7, 8, ChainSpec::new(4), Policy::linear_softmax(4))
    }

    #[test]
    fn worker_sample_matches_direct_rollout() {
        let mut w = RolloutWorker::new(&spec(2)).unwrap();
        let b = w.sample_single();
        let env = ChainEnv::new(ChainSpec::new(4), agent_env_seed(7, 2, 0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(worker_rng_seed(7, 2));
        let expected = EpisodeRunner::new(env).rollout(&Policy::linear_softmax(4), 8, &mut rng).batch;
        assert_eq!(b, expected);
    }

    #[test]
    fn adapt_keeps_learner_version() {
        let mut w = RolloutWorker::new(&spec(0)).unwrap();
        w.set_weights(DEFAULT_POLICY, PolicyWeights { values: vec![0.0; 8], version: 5 }).unwrap();
        let b = w.sample_single();
        w.compute_gradients(&b).unwrap();
        assert_eq!(w.adapt(0.1).unwrap(), 1);
        let next = w.sample_single();
        assert_eq!((next.policy_version, next.adaptation), (5, 1));
        assert!(w.adapt(0.1).is_err());
    }

    #[test]
    fn concat_emits_remainder() {
        let mk = |n: usize| {
            let mut w = RolloutWorker::new(&WorkerSpec::single(0, 1, n, ChainSpec::new(4), Policy::linear_softmax(4)))
                .unwrap();
            w.sample_single()
        };
        let it = LocalIter::from_items(vec![mk(40), mk(40), mk(40), mk(10)]);
        let out: Vec<usize> = concat_batches(it, 100).unwrap().map(|b| b.unwrap().count()).collect();
        assert_eq!(out, vec![120, 10]);
    }
}
