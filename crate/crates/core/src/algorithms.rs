//! Reference training dataflows assembled from the operators in [`crate::ops`].
//!
//! Building a plan spawns its actors but runs nothing; records are produced
//! only as the terminal iterator is pulled.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actor::{ActorError, Runtime};
use crate::metrics::MetricsRecord;
use crate::ops::{
    apply_gradients_op, async_rollouts, bulk_sync_multi_agent, bulk_sync_rollouts, collect_metrics, concat_batches,
    flatten_rounds, gated, meta_update, replay_op, select_policy, spawn_replay_actors, spawn_workers,
    store_to_replay, train_one_step, update_priorities_op, worker_gradients, AgentSpec, Broadcast, FlowContext,
    Learner, ReplayRef, ReplaySpec, RoundKind, SharedLearner, TrainResult, TrainRule, TrainerGate, WorkerRef,
    WorkerSpec, EPISODE_WINDOW,
};
use crate::pariter::{FlowError, LocalIter, SplitStats, StreamError, WeightedRoundRobin};
use crate::toy_rl::{
    greedy_solves, ChainEnv, ChainSpec, MultiAgentBatch, Policy, PolicyId, RlError, SampleBatch, DEFAULT_ALPHA, DEFAULT_BETA,
    DEFAULT_POLICY,
};

pub const PPO_POLICY: &str = "ppo_policy";
pub const DQN_POLICY: &str = "dqn_policy";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algo {
    A2c,
    A3c,
    Dqn,
    Apex,
    TwoTrainer,
    MamlLite,
}

impl Algo {
    pub const ALL: [Algo; 6] = [Algo::A2c, Algo::A3c, Algo::Dqn, Algo::Apex, Algo::TwoTrainer, Algo::MamlLite];

    pub fn name(self) -> &'static str {
        match self {
            Algo::A2c => "a2c",
            Algo::A3c => "a3c",
            Algo::Dqn => "dqn",
            Algo::Apex => "apex",
            Algo::TwoTrainer => "two_trainer",
            Algo::MamlLite => "maml_lite",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            Algo::A2c => "synchronous rollouts, concatenated, one policy-gradient step, broadcast",
            Algo::A3c => "gradients computed on workers, applied as they arrive, weights sent back to the origin",
            Algo::Dqn => "store and train sub-flows alternated by a weighted union over one replay buffer",
            Algo::Apex => "asynchronous storage and replay training running concurrently, periodic weight broadcast",
            Algo::TwoTrainer => "multi-agent rollouts split between a policy-gradient trainer and a Q-learning trainer",
            Algo::MamlLite => "local inner adaptation on every worker, then a first-order meta update",
        }
    }
}

impl fmt::Display for Algo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algo {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = s.to_ascii_lowercase().replace('-', "_");
        Algo::ALL
            .into_iter()
            .find(|a| a.name() == key || (key == "maml" && *a == Algo::MamlLite))
            .ok_or_else(|| {
                let names: Vec<_> = Algo::ALL.iter().map(|a| a.name()).collect();
                format!("unknown algorithm {s:?} (expected one of {})", names.join(", "))
            })
    }
}

/// Knobs shared by all plans. Fields a plan does not use are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgorithmConfig {
    pub num_workers: usize,
    pub horizon: usize,
    pub lr: f64,
    pub train_batch_size: usize,
    /// Steps per policy-gradient update; 0 means one rollout round.
    pub min_batch_size: usize,
    pub num_async: usize,
    pub union_weights: Vec<f64>,
    pub buffer_capacity: usize,
    pub seed: u64,
    pub n_states: usize,
    pub slip: f64,
    pub epsilon: f64,
    pub gamma: f64,
    pub num_replay_actors: usize,
    pub target_update_interval: u64,
    pub replay_alpha: f64,
    pub replay_beta: f64,
    pub inner_steps: usize,
    pub inner_lr: f64,
    /// Learning rate of the Q-learning trainer in the two-trainer plan.
    pub dqn_lr: f64,
    pub ppo_minibatch_size: usize,
    pub ppo_epochs: usize,
    pub split_max_lag: usize,
    pub min_poll_interval_s: f64,
    pub replay_poll_ms: u64,
}

impl Default for AlgorithmConfig {
    fn default() -> Self {
        AlgorithmConfig {
            num_workers: 2,
            horizon: 20,
            lr: 3.0,
            train_batch_size: 32,
            min_batch_size: 0,
            num_async: 1,
            union_weights: vec![1.0, 1.0],
            buffer_capacity: 5000,
            seed: 0,
            n_states: 6,
            slip: 0.0,
            epsilon: 0.1,
            gamma: 0.9,
            num_replay_actors: 1,
            target_update_interval: 16,
            replay_alpha: DEFAULT_ALPHA,
            replay_beta: DEFAULT_BETA,
            inner_steps: 1,
            inner_lr: 0.5,
            dqn_lr: 1.0,
            ppo_minibatch_size: 20,
            ppo_epochs: 2,
            split_max_lag: 8,
            min_poll_interval_s: 0.0,
            replay_poll_ms: 1,
        }
    }
}

impl AlgorithmConfig {
    /// Defaults tuned for each plan on the chain environment.
    pub fn for_algo(algo: Algo) -> Self {
        let base = AlgorithmConfig::default();
        match algo {
            Algo::A2c => base,
            Algo::A3c => AlgorithmConfig {
                num_workers: 4,
                lr: 1.0,
                ..base
            },
            Algo::Dqn => AlgorithmConfig {
                n_states: 8,
                horizon: 16,
                lr: 1.0,
                ..base
            },
            Algo::Apex => AlgorithmConfig {
                n_states: 8,
                horizon: 16,
                num_workers: 4,
                num_replay_actors: 2,
                ..base
            },
            Algo::TwoTrainer => AlgorithmConfig {
                num_workers: 2,
                num_replay_actors: 1,
                ..base
            },
            Algo::MamlLite => base,
        }
    }

    /// One policy-gradient batch: `min_batch_size`, or a full rollout round.
    pub fn effective_min_batch(&self) -> usize {
        if self.min_batch_size == 0 {
            self.num_workers * self.horizon
        } else {
            self.min_batch_size
        }
    }

    pub fn env_spec(&self) -> ChainSpec {
        ChainSpec {
            slip: self.slip,
            ..ChainSpec::new(self.n_states)
        }
    }

    pub fn validate(&self, algo: Algo) -> Result<(), PlanError> {
        let positive = [
            ("num_workers", self.num_workers as f64),
            ("horizon", self.horizon as f64),
            ("train_batch_size", self.train_batch_size as f64),
            ("num_async", self.num_async as f64),
            ("buffer_capacity", self.buffer_capacity as f64),
            ("num_replay_actors", self.num_replay_actors as f64),
            ("target_update_interval", self.target_update_interval as f64),
            ("ppo_minibatch_size", self.ppo_minibatch_size as f64),
            ("ppo_epochs", self.ppo_epochs as f64),
            ("split_max_lag", self.split_max_lag as f64),
        ];
        for (name, v) in positive {
            if v <= 0.0 {
                return Err(PlanError::Config(format!("{name} must be positive")));
            }
        }
        for (name, v) in [("lr", self.lr), ("inner_lr", self.inner_lr), ("dqn_lr", self.dqn_lr)] {
            if !v.is_finite() || v < 0.0 {
                return Err(PlanError::Config(format!("{name} must be a non-negative number, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(PlanError::Config(format!("epsilon must be in [0, 1], got {}", self.epsilon)));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(PlanError::Config(format!("gamma must be in [0, 1], got {}", self.gamma)));
        }
        if self.min_poll_interval_s.is_nan() || self.min_poll_interval_s < 0.0 {
            return Err(PlanError::Config("min_poll_interval_s must be non-negative".into()));
        }
        self.env_spec().validate()?;
        if matches!(algo, Algo::Dqn | Algo::TwoTrainer) {
            if self.union_weights.len() != 2 {
                return Err(PlanError::Config(format!(
                    "{algo} needs exactly two union weights, got {}",
                    self.union_weights.len()
                )));
            }
            WeightedRoundRobin::new(&self.union_weights)?;
            // The synchronous schedule must store before it first trains,
            // otherwise the trainer would wait on an empty buffer forever.
            if self.union_weights[1] > self.union_weights[0] {
                return Err(PlanError::Config(format!(
                    "{algo}: the second union weight may not exceed the first, got {:?}",
                    self.union_weights
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Rl(#[from] RlError),
    #[error(transparent)]
    Actor(#[from] ActorError),
    #[error(transparent)]
    Flow(#[from] FlowError),
}

/// A built dataflow: the terminal metrics stream plus the actors it owns.
pub struct Plan {
    // Dropped before the runtime is shut down.
    terminal: Option<LocalIter<MetricsRecord>>,
    pub name: String,
    config: AlgorithmConfig,
    runtime: Runtime,
    workers: Vec<WorkerRef>,
    replay_actors: Vec<ReplayRef>,
    learners: BTreeMap<PolicyId, SharedLearner>,
    context: Arc<FlowContext>,
    trainer_gate: Option<Arc<TrainerGate>>,
    split_stats: Option<Arc<SplitStats>>,
}

impl fmt::Debug for Plan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Plan")
            .field("name", &self.name)
            .field("workers", &self.workers.len())
            .field("replay_actors", &self.replay_actors.len())
            .finish()
    }
}

impl Plan {
    pub fn next_record(&mut self) -> Result<MetricsRecord, FlowError> {
        match self.terminal.as_mut() {
            Some(t) => t.next_item(),
            None => Err(FlowError::EndOfStream),
        }
    }

    pub fn config(&self) -> &AlgorithmConfig {
        &self.config
    }

    pub fn runtime(&self) -> &Runtime {
        &self.runtime
    }

    pub fn workers(&self) -> &[WorkerRef] {
        &self.workers
    }

    pub fn replay_actors(&self) -> &[ReplayRef] {
        &self.replay_actors
    }

    pub fn learner(&self, policy_id: &str) -> Option<SharedLearner> {
        self.learners.get(policy_id).cloned()
    }

    pub fn context(&self) -> &Arc<FlowContext> {
        &self.context
    }

    /// Pauses the replay trainer (Ape-X only).
    pub fn trainer_gate(&self) -> Option<Arc<TrainerGate>> {
        self.trainer_gate.clone()
    }

    pub fn split_stats(&self) -> Option<Arc<SplitStats>> {
        self.split_stats.clone()
    }

    /// Drops the terminal stream so no further work is requested. Actors
    /// keep running until the plan is dropped.
    pub fn stop(&mut self) {
        if let Some(g) = &self.trainer_gate {
            g.release();
        }
        self.terminal = None;
    }
}

impl Drop for Plan {
    fn drop(&mut self) {
        self.stop();
        self.runtime.shutdown();
    }
}

pub fn build_plan(algo: Algo, cfg: &AlgorithmConfig) -> Result<Plan, PlanError> {
    match algo {
        Algo::A2c => plan_a2c(cfg),
        Algo::A3c => plan_a3c(cfg),
        Algo::Dqn => plan_dqn(cfg),
        Algo::Apex => plan_apex(cfg),
        Algo::TwoTrainer => plan_two_trainer(cfg),
        Algo::MamlLite => plan_maml_lite(cfg),
    }
}

struct Parts {
    runtime: Runtime,
    workers: Vec<WorkerRef>,
    context: Arc<FlowContext>,
}

fn single_agent_parts(cfg: &AlgorithmConfig, policy: Policy) -> Result<Parts, PlanError> {
    let runtime = Runtime::new();
    let specs = (0..cfg.num_workers)
        .map(|i| WorkerSpec::single(i, cfg.seed, cfg.horizon, cfg.env_spec(), policy.clone()))
        .collect();
    let workers = spawn_workers(&runtime, specs)?;
    Ok(Parts {
        runtime,
        workers,
        context: FlowContext::new(),
    })
}

fn replay_spec(cfg: &AlgorithmConfig) -> ReplaySpec {
    ReplaySpec {
        capacity: cfg.buffer_capacity,
        alpha: cfg.replay_alpha,
        beta: cfg.replay_beta,
        seed: cfg.seed,
    }
}

fn finish(
    name: &str,
    cfg: &AlgorithmConfig,
    parts: Parts,
    terminal: LocalIter<MetricsRecord>,
    replay_actors: Vec<ReplayRef>,
    learners: Vec<SharedLearner>,
) -> Plan {
    let learners = learners
        .into_iter()
        .map(|l| {
            let id = l.lock().unwrap_or_else(|p| p.into_inner()).policy_id.clone();
            (id, l)
        })
        .collect();
    Plan {
        terminal: Some(terminal),
        name: name.into(),
        config: cfg.clone(),
        runtime: parts.runtime,
        workers: parts.workers,
        replay_actors,
        learners,
        context: parts.context,
        trainer_gate: None,
        split_stats: None,
    }
}

/// Adds `greedy_solved` (1 or 0) for the learner's greedy policy.
fn with_greedy_check(
    it: LocalIter<MetricsRecord>,
    learner: SharedLearner,
    env: ChainSpec,
) -> Result<LocalIter<MetricsRecord>, PlanError> {
    let env = ChainEnv::new(env, 0)?;
    Ok(it.for_each(move |mut r| {
        let solved = greedy_solves(&learner.lock().unwrap_or_else(|p| p.into_inner()).policy, &env);
        r.set_extra("greedy_solved", if solved { 1.0 } else { 0.0 });
        r
    }))
}

/// Bulk-synchronous rollouts, concatenated to `min_batch_size`, one
/// policy-gradient step per batch with a barriered broadcast.
pub fn plan_a2c(cfg: &AlgorithmConfig) -> Result<Plan, PlanError> {
    cfg.validate(Algo::A2c)?;
    let parts = single_agent_parts(cfg, Policy::linear_softmax(cfg.n_states))?;
    let learner = Learner::new(DEFAULT_POLICY, Policy::linear_softmax(cfg.n_states), cfg.lr, TrainRule::PolicyGradient)
        .shared();
    let ctx = &parts.context;
    let rollouts = flatten_rounds(bulk_sync_rollouts(&parts.workers, ctx)?);
    let batches = concat_batches(rollouts, cfg.effective_min_batch())?;
    let trained = train_one_step(
        batches,
        Arc::clone(&learner),
        Broadcast::every_step(&parts.workers, DEFAULT_POLICY),
        ctx,
    );
    let terminal = collect_metrics(trained, &parts.workers, ctx, cfg.min_poll_interval_s);
    Ok(finish("a2c", cfg, parts, terminal, Vec::new(), vec![learner]))
}

/// Worker-side gradients gathered asynchronously and applied on arrival.
pub fn plan_a3c(cfg: &AlgorithmConfig) -> Result<Plan, PlanError> {
    cfg.validate(Algo::A3c)?;
    let parts = single_agent_parts(cfg, Policy::linear_softmax(cfg.n_states))?;
    let learner = Learner::new(DEFAULT_POLICY, Policy::linear_softmax(cfg.n_states), cfg.lr, TrainRule::PolicyGradient)
        .shared();
    let ctx = &parts.context;
    let grads = worker_gradients(&parts.workers)?.gather_async(cfg.num_async)?;
    let applied = apply_gradients_op(grads, Arc::clone(&learner), &parts.workers, true, ctx);
    let terminal = collect_metrics(applied, &parts.workers, ctx, cfg.min_poll_interval_s);
    Ok(finish("a3c", cfg, parts, terminal, Vec::new(), vec![learner]))
}

/// Store and train sub-flows of a replay-based Q-learner, as iterators over
/// [`TrainResult`].
fn replay_subflows(
    rounds: LocalIter<Vec<SampleBatch>>,
    replay_actors: &[ReplayRef],
    learner: &SharedLearner,
    broadcast: Broadcast,
    cfg: &AlgorithmConfig,
    policy_id: &str,
    ctx: &Arc<FlowContext>,
) -> Result<(LocalIter<TrainResult>, LocalIter<TrainResult>), PlanError> {
    let merged = rounds.try_for_each(|round| SampleBatch::concat(&round).map_err(StreamError::msg));
    let pid = policy_id.to_string();
    let store = store_to_replay(merged, replay_actors, ctx)?.for_each(move |b| TrainResult::sample(&pid, b.count()));
    let replayed = replay_op(
        replay_actors,
        cfg.train_batch_size,
        Duration::from_millis(cfg.replay_poll_ms.max(1)),
        ctx,
    )?;
    let trained = train_one_step(replayed, Arc::clone(learner), broadcast, ctx);
    let train = update_priorities_op(trained, replay_actors, ctx);
    Ok((store, train))
}

fn q_learner(policy_id: &str, cfg: &AlgorithmConfig, lr: f64) -> SharedLearner {
    Learner::new(
        policy_id,
        Policy::epsilon_greedy_q(cfg.n_states, 0.0),
        lr,
        TrainRule::QLearning { gamma: cfg.gamma },
    )
    .shared()
}

/// Synchronous DQN: a weighted union alternates store rounds and train
/// rounds over the same replay actors.
pub fn plan_dqn(cfg: &AlgorithmConfig) -> Result<Plan, PlanError> {
    cfg.validate(Algo::Dqn)?;
    let parts = single_agent_parts(cfg, Policy::epsilon_greedy_q(cfg.n_states, cfg.epsilon))?;
    let replay_actors = spawn_replay_actors(&parts.runtime, cfg.num_replay_actors, replay_spec(cfg))?;
    let learner = q_learner(DEFAULT_POLICY, cfg, cfg.lr);
    let ctx = &parts.context;
    let rounds = bulk_sync_rollouts(&parts.workers, ctx)?;
    let (store, train) = replay_subflows(
        rounds,
        &replay_actors,
        &learner,
        Broadcast::every_step(&parts.workers, DEFAULT_POLICY),
        cfg,
        DEFAULT_POLICY,
        ctx,
    )?;
    let both = LocalIter::union(vec![store, train], cfg.union_weights.clone())?;
    let records = collect_metrics(both, &parts.workers, ctx, cfg.min_poll_interval_s);
    let terminal = with_greedy_check(records, Arc::clone(&learner), cfg.env_spec())?;
    Ok(finish("dqn", cfg, parts, terminal, replay_actors, vec![learner]))
}

/// Ape-X style: asynchronous storage and replay training run concurrently;
/// weights reach the workers every `target_update_interval` train rounds.
pub fn plan_apex(cfg: &AlgorithmConfig) -> Result<Plan, PlanError> {
    cfg.validate(Algo::Apex)?;
    let parts = single_agent_parts(cfg, Policy::epsilon_greedy_q(cfg.n_states, cfg.epsilon))?;
    let replay_actors = spawn_replay_actors(&parts.runtime, cfg.num_replay_actors, replay_spec(cfg))?;
    let learner = q_learner(DEFAULT_POLICY, cfg, cfg.lr);
    let ctx = &parts.context;
    let gate = TrainerGate::new();

    let stored = store_to_replay(async_rollouts(&parts.workers, cfg.num_async, ctx)?, &replay_actors, ctx)?;
    let store = stored.for_each(|b| TrainResult::sample(DEFAULT_POLICY, b.count()));

    let replayed = gated(
        replay_op(
            &replay_actors,
            cfg.train_batch_size,
            Duration::from_millis(cfg.replay_poll_ms.max(1)),
            ctx,
        )?,
        Arc::clone(&gate),
    );
    let broadcast = Broadcast::every(&parts.workers, DEFAULT_POLICY, cfg.target_update_interval);
    let trained = train_one_step(replayed, Arc::clone(&learner), broadcast, ctx);
    let train = update_priorities_op(trained, &replay_actors, ctx);

    let both = LocalIter::union_async(vec![store, train])?;
    let records = collect_metrics(both, &parts.workers, ctx, cfg.min_poll_interval_s);
    let terminal = with_greedy_check(records, Arc::clone(&learner), cfg.env_spec())?;
    let mut plan = finish("apex", cfg, parts, terminal, replay_actors, vec![learner]);
    plan.trainer_gate = Some(gate);
    Ok(plan)
}

/// Which part of the two-trainer flow to build; everything but `Combined`
/// exists to time the sub-flows on their own.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TwoTrainerPart {
    Combined,
    RolloutsOnly,
    PpoOnly,
    DqnOnly,
}

fn two_trainer_workers(cfg: &AlgorithmConfig, runtime: &Runtime) -> Result<Vec<WorkerRef>, PlanError> {
    let env = cfg.env_spec();
    let specs = (0..cfg.num_workers)
        .map(|i| WorkerSpec {
            index: i,
            seed: cfg.seed,
            horizon: cfg.horizon,
            agents: vec![
                AgentSpec {
                    policy_id: PPO_POLICY.into(),
                    env,
                },
                AgentSpec {
                    policy_id: DQN_POLICY.into(),
                    env,
                },
            ],
            policies: BTreeMap::from([
                (PPO_POLICY.to_string(), Policy::linear_softmax(cfg.n_states)),
                (DQN_POLICY.to_string(), Policy::epsilon_greedy_q(cfg.n_states, cfg.epsilon)),
            ]),
            window: EPISODE_WINDOW,
        })
        .collect();
    Ok(spawn_workers(runtime, specs)?)
}

fn tag_trainer(it: LocalIter<TrainResult>, trainer: f64) -> LocalIter<TrainResult> {
    it.for_each(move |mut r| {
        r.record.set_extra("trainer", trainer);
        r
    })
}

/// Two trainers fed from one multi-agent rollout stream: the split sends
/// every round to both; each keeps only its own policy's steps.
pub fn plan_two_trainer(cfg: &AlgorithmConfig) -> Result<Plan, PlanError> {
    plan_two_trainer_part(cfg, TwoTrainerPart::Combined)
}

pub fn plan_two_trainer_part(cfg: &AlgorithmConfig, part: TwoTrainerPart) -> Result<Plan, PlanError> {
    cfg.validate(Algo::TwoTrainer)?;
    let runtime = Runtime::new();
    let workers = two_trainer_workers(cfg, &runtime)?;
    let parts = Parts {
        runtime,
        workers,
        context: FlowContext::new(),
    };
    let ctx = &parts.context;
    let ppo_rule = TrainRule::MinibatchPolicyGradient {
        minibatch_size: cfg.ppo_minibatch_size,
        epochs: cfg.ppo_epochs,
    };
    let ppo_learner = Learner::new(PPO_POLICY, Policy::linear_softmax(cfg.n_states), cfg.lr, ppo_rule).shared();
    let dqn_learner = q_learner(DQN_POLICY, cfg, cfg.dqn_lr);
    let replay_actors = spawn_replay_actors(&parts.runtime, cfg.num_replay_actors, replay_spec(cfg))?;

    let rounds = bulk_sync_multi_agent(&parts.workers, ctx)?.for_each(Arc::new);
    let ppo_flow = |rounds: LocalIter<Arc<Vec<MultiAgentBatch>>>| -> Result<LocalIter<TrainResult>, PlanError> {
        let batches = flatten_rounds(select_policy(rounds, PPO_POLICY, ctx));
        let batches = concat_batches(batches, cfg.num_workers * cfg.horizon)?;
        let trained = train_one_step(
            batches,
            Arc::clone(&ppo_learner),
            Broadcast::every_step(&parts.workers, PPO_POLICY),
            ctx,
        );
        Ok(tag_trainer(trained, 0.0))
    };
    let dqn_flow = |rounds: LocalIter<Arc<Vec<MultiAgentBatch>>>| -> Result<LocalIter<TrainResult>, PlanError> {
        let (store, train) = replay_subflows(
            select_policy(rounds, DQN_POLICY, ctx),
            &replay_actors,
            &dqn_learner,
            Broadcast::every_step(&parts.workers, DQN_POLICY),
            cfg,
            DQN_POLICY,
            ctx,
        )?;
        // One store per `w_ppo / w_dqn` train records keeps both branches
        // consuming rollout rounds at the same rate.
        let inner = LocalIter::union(vec![store, train], cfg.union_weights.clone())?;
        Ok(tag_trainer(inner.filter(|r| r.kind == RoundKind::Train), 1.0))
    };

    let mut split_stats = None;
    let trained = match part {
        TwoTrainerPart::Combined => {
            let (a, b, stats) = rounds.split_observed(cfg.split_max_lag)?;
            split_stats = Some(stats);
            LocalIter::union(vec![ppo_flow(a)?, dqn_flow(b)?], cfg.union_weights.clone())?
        }
        TwoTrainerPart::PpoOnly => ppo_flow(rounds)?,
        TwoTrainerPart::DqnOnly => dqn_flow(rounds)?,
        TwoTrainerPart::RolloutsOnly => rounds.for_each(|round| {
            let steps = round.iter().map(|b| b.count()).sum();
            TrainResult::sample(PPO_POLICY, steps)
        }),
    };
    let terminal = collect_metrics(trained, &parts.workers, ctx, cfg.min_poll_interval_s);
    let mut plan = finish(
        "two_trainer",
        cfg,
        parts,
        terminal,
        replay_actors,
        vec![ppo_learner, dqn_learner],
    );
    plan.split_stats = split_stats;
    Ok(plan)
}

/// Meta-rounds of `inner_steps` adapted rollout rounds followed by one
/// post-adaptation round whose gradients form the meta update.
pub fn plan_maml_lite(cfg: &AlgorithmConfig) -> Result<Plan, PlanError> {
    cfg.validate(Algo::MamlLite)?;
    let parts = single_agent_parts(cfg, Policy::linear_softmax(cfg.n_states))?;
    let learner = Learner::new(DEFAULT_POLICY, Policy::linear_softmax(cfg.n_states), cfg.lr, TrainRule::PolicyGradient)
        .shared();
    let ctx = &parts.context;
    let rounds = worker_gradients(&parts.workers)?.gather_sync();
    let meta = meta_update(
        rounds,
        Arc::clone(&learner),
        &parts.workers,
        cfg.inner_steps,
        cfg.inner_lr,
        ctx,
    );
    let terminal = collect_metrics(meta, &parts.workers, ctx, cfg.min_poll_interval_s);
    Ok(finish("maml_lite", cfg, parts, terminal, Vec::new(), vec![learner]))
}

#[derive(Debug, Error)]
#[error("run stopped after {} records: {error}", records.len())]
pub struct RunError {
    pub records: Vec<MetricsRecord>,
    pub error: FlowError,
}

/// Pulls exactly `num_iterations` records from the plan.
pub fn run_plan(plan: &mut Plan, num_iterations: usize) -> Result<Vec<MetricsRecord>, RunError> {
    let mut records = Vec::with_capacity(num_iterations);
    for _ in 0..num_iterations {
        match plan.next_record() {
            Ok(r) => records.push(r),
            Err(error) => return Err(RunError { records, error }),
        }
    }
    Ok(records)
}

/// Builds a plan, runs it and drops it.
pub fn train(algo: Algo, cfg: &AlgorithmConfig, num_iterations: usize) -> Result<Vec<MetricsRecord>, TrainError> {
    let mut plan = build_plan(algo, cfg)?;
    Ok(run_plan(&mut plan, num_iterations)?)
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Run(#[from] RunError),
}

/// Final learner weights of a plan's policy.
pub fn learner_weights(plan: &Plan, policy_id: &str) -> Option<crate::toy_rl::PolicyWeights> {
    plan.learner(policy_id)
        .map(|l| l.lock().unwrap_or_else(|p| p.into_inner()).weights())
}
