use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use actorflow::actor::Runtime;
use actorflow::metrics::MetricsRecord;
use actorflow::ops::{
    apply_gradients_op, async_rollouts, bulk_sync_rollouts, collect_metrics, concat_batches, flatten_rounds,
    replay_op, spawn_replay_actors, spawn_workers, store_to_replay, train_one_step, update_priorities_op,
    worker_gradients, Broadcast, FlowContext, Learner, ReplayActor, ReplaySpec, RolloutWorker, TrainResult,
    TrainRule, WorkerGradients, WorkerRef, WorkerSpec, PRIORITY_EPSILON,
};
use actorflow::pariter::{FlowError, LocalIter};
use actorflow::toy_rl::{ChainSpec, Gradients, Policy, SampleBatch, DEFAULT_POLICY};
use proptest::prelude::*;

fn workers(rt: &Runtime, n: usize, seed: u64, horizon: usize, n_states: usize) -> Vec<WorkerRef> {
    let specs = (0..n)
        .map(|i| WorkerSpec::single(i, seed, horizon, ChainSpec::new(n_states), Policy::linear_softmax(n_states)))
        .collect();
    spawn_workers(rt, specs).unwrap()
}

fn replay_spec(capacity: usize) -> ReplaySpec {
    ReplaySpec {
        capacity,
        alpha: 0.6,
        beta: 0.4,
        seed: 1,
    }
}

fn steps(n: usize, start: usize) -> SampleBatch {
    SampleBatch {
        obs: (0..n).map(|i| vec![(start + i) as f64]).collect(),
        actions: vec![0; n],
        rewards: (0..n).map(|i| (start + i) as f64).collect(),
        dones: vec![false; n],
        truncated: vec![false; n],
        next_obs: (0..n).map(|i| vec![(start + i + 1) as f64]).collect(),
        policy_version: 0,
        adaptation: 0,
    }
}

#[test]
fn bulk_sync_rounds_have_one_full_batch_per_worker() {
    let rt = Runtime::new();
    let ws = workers(&rt, 4, 3, 7, 5);
    let ctx = FlowContext::new();
    let mut rounds = bulk_sync_rollouts(&ws, &ctx).unwrap();
    for _ in 0..3 {
        let round = rounds.next_item().unwrap();
        assert_eq!(round.len(), 4);
        assert!(round.iter().all(|b| b.count() == 7));
    }
    assert_eq!(ctx.counters().steps_sampled, 3 * 4 * 7);
    assert_eq!(bulk_sync_rollouts(&[], &ctx).err(), Some(FlowError::EmptySource));
}

#[test]
fn async_rollouts_are_not_held_back_by_a_slow_worker() {
    let rt = Runtime::new();
    let mut specs: Vec<WorkerSpec> = (0..4)
        .map(|i| WorkerSpec::single(i, 0, 10, ChainSpec::new(5), Policy::linear_softmax(5)))
        .collect();
    specs[0].horizon = 400_000;
    let ws = spawn_workers(&rt, specs).unwrap();
    let ctx = FlowContext::new();
    let mut it = async_rollouts(&ws, 1, &ctx).unwrap();
    let first: Vec<usize> = (0..30).map(|_| it.next_item().unwrap().count()).collect();
    let fast = first.iter().filter(|&&c| c == 10).count();
    assert!(fast >= 29, "{first:?}");
}

#[test]
fn concat_reaches_the_minimum_and_keeps_order() {
    let input = vec![steps(40, 0), steps(40, 40), steps(40, 80), steps(10, 120)];
    let out: Vec<SampleBatch> = concat_batches(LocalIter::from_items(input.clone()), 100)
        .unwrap()
        .map(Result::unwrap)
        .collect();
    assert_eq!(out.iter().map(SampleBatch::count).collect::<Vec<_>>(), vec![120, 10]);
    assert_eq!(out[0], SampleBatch::concat(&input[..3]).unwrap());

    let passthrough: Vec<SampleBatch> = concat_batches(LocalIter::from_items(input.clone()), 1)
        .unwrap()
        .map(Result::unwrap)
        .collect();
    assert_eq!(passthrough, input);
    assert!(concat_batches(LocalIter::from_items(input), 0).is_err());
}

proptest! {
    #[test]
    fn concat_neither_drops_nor_duplicates_steps(
        sizes in prop::collection::vec(1usize..30, 0..20),
        min in 1usize..80,
    ) {
        let mut start = 0;
        let input: Vec<SampleBatch> = sizes.iter().map(|&n| { let b = steps(n, start); start += n; b }).collect();
        let out: Vec<SampleBatch> = concat_batches(LocalIter::from_items(input.clone()), min).unwrap().map(Result::unwrap).collect();
        if input.is_empty() {
            prop_assert!(out.is_empty());
        } else {
            prop_assert_eq!(SampleBatch::concat(&out).unwrap(), SampleBatch::concat(&input).unwrap());
            for b in &out[..out.len() - 1] {
                prop_assert!(b.count() >= min);
            }
        }
    }
}

/// Bulk-sync rollouts, one concatenated batch per round, train and broadcast.
/// Returns the policy versions carried by each round's batches.
fn versions_per_round(num_workers: usize, rounds: usize, seed: u64) -> Vec<Vec<u64>> {
    let rt = Runtime::new();
    let ws = workers(&rt, num_workers, seed, 10, 6);
    let ctx = FlowContext::new();
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    let batches = flatten_rounds(bulk_sync_rollouts(&ws, &ctx).unwrap().for_each(move |round: Vec<SampleBatch>| {
        log.lock().unwrap().push(round.iter().map(|b| b.policy_version).collect());
        round
    }));
    let learner = Learner::new(DEFAULT_POLICY, Policy::linear_softmax(6), 1.0, TrainRule::PolicyGradient).shared();
    let mut trained = train_one_step(
        concat_batches(batches, num_workers * 10).unwrap(),
        learner,
        Broadcast::every_step(&ws, DEFAULT_POLICY),
        &ctx,
    );
    for k in 1..=rounds {
        assert_eq!(trained.next_item().unwrap().record.learner_version, k as u64);
    }
    let out = seen.lock().unwrap().clone();
    out
}

#[test]
fn round_k_plus_one_batches_carry_version_k() {
    for run in 0..5 {
        let rounds = versions_per_round(4, 100, run);
        assert_eq!(rounds.len(), 100);
        for (k, versions) in rounds.iter().enumerate() {
            assert_eq!(versions, &vec![k as u64; 4], "run {run}, round {}", k + 1);
        }
    }
}

#[test]
fn workers_hold_the_learner_version_after_each_round() {
    let rt = Runtime::new();
    let ws = workers(&rt, 3, 1, 8, 4);
    let ctx = FlowContext::new();
    let learner = Learner::new(DEFAULT_POLICY, Policy::linear_softmax(4), 1.0, TrainRule::PolicyGradient).shared();
    let mut trained = train_one_step(
        flatten_rounds(bulk_sync_rollouts(&ws, &ctx).unwrap()),
        Arc::clone(&learner),
        Broadcast::every_step(&ws, DEFAULT_POLICY),
        &ctx,
    );
    for k in 1..=10u64 {
        let r = trained.next_item().unwrap();
        assert_eq!(r.record.learner_version, k);
        let expected = learner.lock().unwrap().weights();
        for w in &ws {
            assert_eq!(w.ask("get", |s: &mut RolloutWorker| s.weights(DEFAULT_POLICY)).unwrap(), Some(expected.clone()));
        }
    }
}

#[test]
fn zero_return_batch_changes_only_the_version() {
    let ctx = FlowContext::new();
    let learner = Learner::new(DEFAULT_POLICY, Policy::linear_softmax(1), 1.0, TrainRule::PolicyGradient).shared();
    let mut batch = steps(5, 0);
    batch.obs = vec![vec![1.0]; 5];
    batch.rewards = vec![0.0; 5];
    let mut it = train_one_step(LocalIter::from_items(vec![batch]), Arc::clone(&learner), Broadcast::none(), &ctx);
    assert_eq!(it.next_item().unwrap().record.learner_version, 1);
    let w = learner.lock().unwrap().weights();
    assert_eq!((w.values, w.version), (vec![0.0, 0.0], 1));
}

fn grad(values: Vec<f64>, worker: usize) -> WorkerGradients {
    WorkerGradients {
        worker_index: worker,
        grads: Gradients {
            values,
            source_version: 0,
            count: 1,
        },
        steps: 1,
        batch_version: 0,
        adaptation: 0,
    }
}

#[test]
fn applied_gradients_sum_regardless_of_arrival_order() {
    let g1 = vec![0.5, -1.0, 2.0, 0.25];
    let g2 = vec![-0.75, 0.125, 1.0, 3.0];
    let run = |order: Vec<WorkerGradients>| {
        let ctx = FlowContext::new();
        let learner = Learner::new(DEFAULT_POLICY, Policy::linear_softmax(2), 0.1, TrainRule::PolicyGradient).shared();
        let records: Vec<TrainResult> = apply_gradients_op(LocalIter::from_items(order), Arc::clone(&learner), &[], false, &ctx)
            .map(Result::unwrap)
            .collect();
        assert_eq!(records.last().unwrap().record.learner_version, 2);
        assert_eq!(records[1].record.extra("staleness"), Some(1.0));
        let w = learner.lock().unwrap().weights();
        w.values
    };
    let a = run(vec![grad(g1.clone(), 0), grad(g2.clone(), 1)]);
    let b = run(vec![grad(g2.clone(), 1), grad(g1.clone(), 0)]);
    for i in 0..4 {
        let expected = 0.1 * (g1[i] + g2[i]);
        assert!((a[i] - expected).abs() <= 1e-12 && (b[i] - expected).abs() <= 1e-12);
    }
}

#[test]
fn origin_worker_samples_with_the_pushed_version_or_newer() {
    let rt = Runtime::new();
    let ws = workers(&rt, 4, 9, 10, 6);
    let ctx = FlowContext::new();
    let learner = Learner::new(DEFAULT_POLICY, Policy::linear_softmax(6), 1.0, TrainRule::PolicyGradient).shared();
    let pushed: Arc<Mutex<HashMap<usize, u64>>> = Arc::default();
    let check = Arc::clone(&pushed);
    let grads = worker_gradients(&ws).unwrap().gather_async(1).unwrap().for_each(move |wg: WorkerGradients| {
        let last = check.lock().unwrap().get(&wg.worker_index).copied().unwrap_or(0);
        assert!(wg.batch_version >= last, "worker {} stamped {} after {last} was pushed", wg.worker_index, wg.batch_version);
        wg
    });
    let mut applied = apply_gradients_op(grads, learner, &ws, true, &ctx).for_each(move |r: TrainResult| {
        let origin = r.record.extra("origin_worker").unwrap() as usize;
        pushed.lock().unwrap().insert(origin, r.record.learner_version);
        r
    });
    for n in 1..=200u64 {
        assert_eq!(applied.next_item().unwrap().record.learner_version, n);
    }
    assert_eq!(ctx.counters().gradients_applied, 200);
}

#[test]
fn store_round_robins_over_replay_actors() {
    let rt = Runtime::new();
    let actors = spawn_replay_actors(&rt, 3, replay_spec(100)).unwrap();
    let ctx = FlowContext::new();
    let input: Vec<SampleBatch> = (0..6).map(|i| steps(2, 2 * i)).collect();
    let passed: Vec<SampleBatch> = store_to_replay(LocalIter::from_items(input.clone()), &actors, &ctx)
        .unwrap()
        .map(Result::unwrap)
        .collect();
    assert_eq!(passed, input);
    for a in &actors {
        assert_eq!(a.ask("len", |r: &mut ReplayActor| r.buffer().len()).unwrap(), 4);
    }
    assert_eq!(ctx.counters().batches_stored, 6);
}

#[test]
fn store_counts_drops_and_keeps_flowing() {
    let other = Runtime::new();
    let actors = spawn_replay_actors(&other, 1, replay_spec(10)).unwrap();
    other.shutdown();
    let ctx = FlowContext::new();
    let passed = store_to_replay(LocalIter::from_items(vec![steps(1, 0), steps(1, 1)]), &actors, &ctx)
        .unwrap()
        .count();
    assert_eq!(passed, 2);
    assert_eq!(ctx.counters().store_drops, 2);
}

#[test]
fn replay_buffers_stay_within_capacity() {
    let rt = Runtime::new();
    let actors = spawn_replay_actors(&rt, 2, replay_spec(25)).unwrap();
    let ctx = FlowContext::new();
    let input: Vec<SampleBatch> = (0..40).map(|i| steps(7, 7 * i)).collect();
    store_to_replay(LocalIter::from_items(input), &actors, &ctx).unwrap().for_each(drop).count();
    for a in &actors {
        let (len, peak) = a.ask("len", |r: &mut ReplayActor| (r.buffer().len(), r.peak_len())).unwrap();
        assert_eq!(len, 25);
        assert!(peak <= 25);
    }
}

#[test]
fn replay_waits_for_the_first_store() {
    let rt = Runtime::new();
    let actors = spawn_replay_actors(&rt, 2, replay_spec(50)).unwrap();
    let ctx = FlowContext::new();
    let mut it = replay_op(&actors, 8, Duration::from_millis(2), &ctx).unwrap();
    let reader = thread::spawn(move || it.next_item().unwrap());
    thread::sleep(Duration::from_millis(100));
    assert!(!reader.is_finished());
    let stored_ids = actors[1].ask("add", |r: &mut ReplayActor| r.add(&steps(5, 0))).unwrap().unwrap();
    let sampled = reader.join().unwrap();
    assert_eq!(sampled.source, 1);
    assert_eq!(sampled.sampled.batch.count(), 8);
    assert!(sampled.sampled.ids.iter().all(|id| stored_ids.contains(id)));
}

#[test]
fn trained_ids_get_td_error_priorities() {
    let rt = Runtime::new();
    let actors = spawn_replay_actors(&rt, 2, replay_spec(1000)).unwrap();
    let ctx = FlowContext::new();
    let ws = workers(&rt, 2, 4, 12, 5);
    let rollouts = flatten_rounds(bulk_sync_rollouts(&ws, &ctx).unwrap());
    store_to_replay(rollouts, &actors, &ctx).unwrap().take(6).for_each(drop);
    let learner = Learner::new(
        DEFAULT_POLICY,
        Policy::epsilon_greedy_q(5, 0.0),
        0.5,
        TrainRule::QLearning { gamma: 0.9 },
    )
    .shared();
    let replayed = replay_op(&actors, 16, Duration::from_millis(1), &ctx).unwrap();
    let trained = train_one_step(replayed, learner, Broadcast::none(), &ctx);
    let mut updated = update_priorities_op(trained, &actors, &ctx);
    let mut ids_trained = 0u64;
    for _ in 0..20 {
        let r = updated.next_item().unwrap();
        let t = r.replay.clone().unwrap();
        ids_trained += t.ids.len() as u64;
        let mut last: HashMap<u64, f64> = HashMap::new();
        for (id, td) in t.ids.iter().zip(&t.td_errors) {
            last.insert(*id, td.abs() + PRIORITY_EPSILON);
        }
        for (id, expected) in last {
            let p = actors[t.source]
                .ask("priority", move |a: &mut ReplayActor| a.buffer().priority(id))
                .unwrap()
                .unwrap();
            assert_eq!(p, expected);
        }
        assert_eq!(r.record.extra("priority_updates"), Some(t.ids.len() as f64));
    }
    let c = ctx.counters();
    assert_eq!(c.priority_updates, ids_trained);
    assert_eq!(c.stale_priority_updates, 0);
    assert!(ctx.pending_updates().is_empty());
}

#[test]
fn optimal_policy_scores_one_per_episode() {
    let rt = Runtime::new();
    let mut policy = Policy::linear_softmax(4);
    for s in 0..4 {
        policy.weights.values[4 + s] = 50.0;
    }
    let specs = (0..2).map(|i| WorkerSpec::single(i, 0, 30, ChainSpec::new(4), policy.clone())).collect();
    let ws = spawn_workers(&rt, specs).unwrap();
    let ctx = FlowContext::new();

    let mut idle = collect_metrics(LocalIter::from_items(vec![TrainResult::sample(DEFAULT_POLICY, 0)]), &ws, &ctx, 0.0);
    let first = idle.next_item().unwrap();
    assert_eq!(first.mean_episode_reward, None);

    let rounds = bulk_sync_rollouts(&ws, &ctx)
        .unwrap()
        .for_each(|r: Vec<SampleBatch>| TrainResult::sample(DEFAULT_POLICY, r.iter().map(SampleBatch::count).sum()));
    let records: Vec<MetricsRecord> = collect_metrics(rounds, &ws, &ctx, 0.0).take(5).map(Result::unwrap).collect();
    assert_eq!(records.iter().map(|r| r.iter).collect::<Vec<_>>(), vec![1, 2, 3, 4, 5]);
    for r in &records {
        assert_eq!(r.mean_episode_reward, Some(1.0));
    }
    assert!(records.windows(2).all(|w| w[0].steps_sampled <= w[1].steps_sampled));
}

#[test]
fn unreachable_workers_leave_reward_empty() {
    let other = Runtime::new();
    let ws = workers(&other, 2, 0, 5, 4);
    other.shutdown();
    let ctx = FlowContext::new();
    let mut it = collect_metrics(LocalIter::from_items(vec![TrainResult::sample(DEFAULT_POLICY, 1)]), &ws, &ctx, 0.0);
    assert_eq!(it.next_item().unwrap().mean_episode_reward, None);
}
