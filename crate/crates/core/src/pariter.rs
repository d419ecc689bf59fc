//! Lazy parallel and sequential iterators over actor-hosted shards.
//!
//! A [`ParIter`] is a list of shards, each pairing a source actor with the
//! chain of transforms to run *on that actor* when an item is pulled. Nothing
//! executes until a sequential [`LocalIter`] built from it is pulled:
//!
//! * [`ParIter::gather_sync`] pulls one item from every shard per round and
//!   waits for all of them. Shards are idle between rounds, so messages sent
//!   (and awaited) to the source actors between two `next` calls are visible
//!   to every computation of the following round.
//! * [`ParIter::gather_async`] keeps up to `num_async` pulls in flight per
//!   shard and yields items in completion order. No barrier applies.
//!
//! Sequential iterators compose with [`LocalIter::union`] (weighted
//! round-robin), [`LocalIter::union_async`] (completion order, children driven
//! on their own threads) and [`LocalIter::split`] (two consumers, bounded
//! buffering).
//!
//! Errors travel in-band as `Err(StreamError)` items and end the stream once
//! a sequential consumer has seen them.

use std::collections::VecDeque;
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::{self, ThreadId};

use crate::actor::{ActorError, ActorRef, DeliveryFailure, ReplyHandle};

/// Failure carried inside a stream.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StreamError {
    #[error(transparent)]
    Actor(#[from] ActorError),
    #[error("{0}")]
    Failed(String),
}

impl StreamError {
    pub fn msg(m: impl fmt::Display) -> Self {
        StreamError::Failed(m.to_string())
    }
}

pub type StreamResult<T> = Result<T, StreamError>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FlowError {
    #[error("a parallel iterator needs at least one source actor")]
    EmptySource,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("end of stream")]
    EndOfStream,
    #[error(transparent)]
    Stream(#[from] StreamError),
}

/// How many times a shard pull is re-issued after its actor was restarted.
const RESTART_RETRIES: usize = 8;

type PullFn<S, T> = Box<dyn FnMut(&mut S) -> Option<StreamResult<T>> + Send>;

struct Shard<S, T> {
    actor: ActorRef<S>,
    pull: PullFn<S, T>,
}

/// Parallel iterator sharded over actors of state type `S`.
pub struct ParIter<S, T> {
    shards: Vec<Shard<S, T>>,
}

impl<S, T> fmt::Debug for ParIter<S, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ParIter").field("num_shards", &self.shards.len()).finish()
    }
}

impl<S: 'static, T: Send + 'static> ParIter<S, T> {
    /// One shard per source actor. `item_fn` is cloned per shard and runs on
    /// the source actor each time that shard is pulled; `None` ends the shard.
    pub fn create<F>(sources: Vec<ActorRef<S>>, item_fn: F) -> Result<Self, FlowError>
    where
        F: FnMut(&mut S) -> Option<StreamResult<T>> + Clone + Send + 'static,
    {
        if sources.is_empty() {
            return Err(FlowError::EmptySource);
        }
        let shards = sources
            .into_iter()
            .map(|actor| Shard {
                actor,
                pull: Box::new(item_fn.clone()) as PullFn<S, T>,
            })
            .collect();
        Ok(ParIter { shards })
    }

    /// Infinite shards generated by `item_fn`.
    pub fn from_actors<F>(sources: Vec<ActorRef<S>>, mut item_fn: F) -> Result<Self, FlowError>
    where
        F: FnMut(&mut S) -> T + Clone + Send + 'static,
    {
        Self::create(sources, move |s: &mut S| Some(Ok(item_fn(s))))
    }

    pub fn num_shards(&self) -> usize {
        self.shards.len()
    }

    pub fn actors(&self) -> Vec<ActorRef<S>> {
        self.shards.iter().map(|s| s.actor.clone()).collect()
    }

    /// Applies `f` to every item on its source actor. Each shard gets its own
    /// clone of `f`, so `f` may carry per-shard state.
    pub fn for_each<U, F>(self, mut f: F) -> ParIter<S, U>
    where
        U: Send + 'static,
        F: FnMut(T) -> U + Clone + Send + 'static,
    {
        self.try_for_each_on_actor(move |_, t| Ok(f(t)))
    }

    /// Like [`ParIter::for_each`] but `f` also sees the actor state and may
    /// fail; a failure becomes an in-band error item.
    pub fn try_for_each_on_actor<U, F>(self, f: F) -> ParIter<S, U>
    where
        U: Send + 'static,
        F: FnMut(&mut S, T) -> StreamResult<U> + Clone + Send + 'static,
    {
        let shards = self
            .shards
            .into_iter()
            .map(|Shard { actor, mut pull }| {
                let mut f = f.clone();
                let pull: PullFn<S, U> = Box::new(move |s: &mut S| match pull(s)? {
                    Ok(t) => Some(f(s, t)),
                    Err(e) => Some(Err(e)),
                });
                Shard { actor, pull }
            })
            .collect();
        ParIter { shards }
    }

    /// Barriered gather: each item is the list of one item per shard, in
    /// shard order.
    pub fn gather_sync(self) -> LocalIter<Vec<T>> {
        let mut gather = SyncGather {
            shards: self.shards.into_iter().map(SharedShard::new).collect(),
        };
        LocalIter::from_pull(Provenance::GatherSync, move || gather.next_round())
    }

    /// Gather plus a per-round combine, e.g. summing across shards.
    pub fn batch_across<U, F>(self, combine: F) -> LocalIter<U>
    where
        U: Send + 'static,
        F: FnMut(Vec<T>) -> U + Send + 'static,
    {
        self.gather_sync().for_each(combine)
    }

    /// Completion-order gather with at most `num_async` pulls in flight per
    /// shard.
    pub fn gather_async(self, num_async: usize) -> Result<LocalIter<T>, FlowError> {
        Ok(self
            .gather_async_indexed(num_async, None)?
            .for_each(|(_, t)| t)
            .with_provenance(Provenance::GatherAsync))
    }

    /// Like [`ParIter::gather_async`] but tags each item with its shard
    /// index, and optionally reports in-flight counts to `probe`.
    pub fn gather_async_indexed(
        self,
        num_async: usize,
        probe: Option<Arc<InFlightProbe>>,
    ) -> Result<LocalIter<(usize, T)>, FlowError> {
        if num_async == 0 {
            return Err(FlowError::InvalidArgument("num_async must be at least 1".into()));
        }
        let n = self.shards.len();
        let probe = probe.unwrap_or_else(|| Arc::new(InFlightProbe::new(n)));
        if probe.num_shards() != n {
            return Err(FlowError::InvalidArgument(format!(
                "probe tracks {} shards, iterator has {n}",
                probe.num_shards()
            )));
        }
        let (tx, rx) = mpsc::channel();
        let mut gather = AsyncGather {
            shards: self
                .shards
                .into_iter()
                .map(|s| AsyncShard {
                    shard: SharedShard::new(s),
                    outstanding: 0,
                    exhausted: false,
                })
                .collect(),
            num_async,
            tx,
            rx,
            started: false,
            refill: None,
            probe,
            finished: false,
        };
        Ok(LocalIter::from_pull(Provenance::GatherAsync, move || gather.next_item()))
    }
}

struct SharedShard<S, T> {
    actor: ActorRef<S>,
    pull: Arc<Mutex<PullFn<S, T>>>,
}

impl<S: 'static, T: Send + 'static> SharedShard<S, T> {
    fn new(shard: Shard<S, T>) -> Self {
        SharedShard {
            actor: shard.actor,
            pull: Arc::new(Mutex::new(shard.pull)),
        }
    }

    fn submit(&self) -> ReplyHandle<Option<StreamResult<T>>> {
        let pull = Arc::clone(&self.pull);
        self.actor.call("pull", move |s: &mut S| (lock(&pull))(s))
    }

    /// Moves to the actor's newest incarnation. False when there is none
    /// newer than the one that failed.
    fn follow_restart(&mut self) -> bool {
        let latest = self.actor.latest();
        let moved = latest.incarnation() != self.actor.incarnation();
        self.actor = latest;
        moved
    }
}

struct SyncGather<S, T> {
    shards: Vec<SharedShard<S, T>>,
}

impl<S: 'static, T: Send + 'static> SyncGather<S, T> {
    fn next_round(&mut self) -> Option<StreamResult<Vec<T>>> {
        let handles: Vec<_> = self.shards.iter().map(SharedShard::submit).collect();
        let mut round = Vec::with_capacity(handles.len());
        let mut failure = None;
        let mut ended = false;
        for (i, handle) in handles.into_iter().enumerate() {
            match self.await_shard(i, handle) {
                Ok(Some(Ok(t))) => round.push(t),
                Ok(Some(Err(e))) => {
                    failure.get_or_insert(e);
                }
                Ok(None) => ended = true,
                Err(e) => {
                    failure.get_or_insert(e.into());
                }
            }
        }
        match failure {
            Some(e) => Some(Err(e)),
            None if ended => None,
            None => Some(Ok(round)),
        }
    }

    fn await_shard(
        &mut self,
        i: usize,
        mut handle: ReplyHandle<Option<StreamResult<T>>>,
    ) -> Result<Option<StreamResult<T>>, ActorError> {
        let mut retries = 0;
        loop {
            match handle.into_result() {
                Err(e) if e.is_restart() && retries < RESTART_RETRIES && self.shards[i].follow_restart() => {
                    retries += 1;
                    handle = self.shards[i].submit();
                }
                other => return other,
            }
        }
    }
}

/// Per-shard in-flight gauge for [`ParIter::gather_async_indexed`].
#[derive(Debug)]
pub struct InFlightProbe {
    current: Vec<AtomicUsize>,
    peak: Vec<AtomicUsize>,
}

impl InFlightProbe {
    pub fn new(num_shards: usize) -> Self {
        InFlightProbe {
            current: (0..num_shards).map(|_| AtomicUsize::new(0)).collect(),
            peak: (0..num_shards).map(|_| AtomicUsize::new(0)).collect(),
        }
    }

    pub fn num_shards(&self) -> usize {
        self.current.len()
    }

    pub fn current(&self, shard: usize) -> usize {
        self.current[shard].load(Ordering::SeqCst)
    }

    /// Highest number of incomplete computations ever observed on `shard`.
    pub fn peak(&self, shard: usize) -> usize {
        self.peak[shard].load(Ordering::SeqCst)
    }

    fn started(&self, shard: usize) {
        let now = self.current[shard].fetch_add(1, Ordering::SeqCst) + 1;
        self.peak[shard].fetch_max(now, Ordering::SeqCst);
    }

    fn completed(&self, shard: usize) {
        self.current[shard].fetch_sub(1, Ordering::SeqCst);
    }
}

enum Completion<T> {
    Item(usize, Option<StreamResult<T>>),
    Lost(usize),
}

/// Reports a shard computation exactly once: with its result when it runs,
/// or as lost when the message is dropped undelivered.
struct CompletionGuard<T> {
    shard: usize,
    tx: Sender<Completion<T>>,
    probe: Arc<InFlightProbe>,
    reported: bool,
}

impl<T> CompletionGuard<T> {
    fn complete(mut self, item: Option<StreamResult<T>>) {
        self.reported = true;
        self.probe.completed(self.shard);
        let _ = self.tx.send(Completion::Item(self.shard, item));
    }
}

impl<T> Drop for CompletionGuard<T> {
    fn drop(&mut self) {
        if !self.reported {
            self.probe.completed(self.shard);
            let _ = self.tx.send(Completion::Lost(self.shard));
        }
    }
}

struct AsyncShard<S, T> {
    shard: SharedShard<S, T>,
    outstanding: usize,
    exhausted: bool,
}

struct AsyncGather<S, T> {
    shards: Vec<AsyncShard<S, T>>,
    num_async: usize,
    tx: Sender<Completion<T>>,
    rx: Receiver<Completion<T>>,
    started: bool,
    refill: Option<usize>,
    probe: Arc<InFlightProbe>,
    finished: bool,
}

impl<S: 'static, T: Send + 'static> AsyncGather<S, T> {
    fn submit(&mut self, i: usize) {
        let guard = CompletionGuard {
            shard: i,
            tx: self.tx.clone(),
            probe: Arc::clone(&self.probe),
            reported: false,
        };
        self.probe.started(i);
        self.shards[i].outstanding += 1;
        let pull = Arc::clone(&self.shards[i].shard.pull);
        // A failed send drops the closure, and with it the guard, which
        // reports the pull as lost.
        drop(self.shards[i].shard.actor.call("pull", move |s: &mut S| {
            let item = (lock(&pull))(s);
            guard.complete(item);
        }));
    }

    fn next_item(&mut self) -> Option<StreamResult<(usize, T)>> {
        if self.finished {
            return None;
        }
        if !self.started {
            self.started = true;
            for i in 0..self.shards.len() {
                for _ in 0..self.num_async {
                    self.submit(i);
                }
            }
        } else if let Some(i) = self.refill.take() {
            // Deferred until now so that messages the consumer sent to this
            // shard's actor after receiving its last item are queued ahead
            // of the replacement pull.
            if !self.shards[i].exhausted {
                self.submit(i);
            }
        }
        loop {
            if self.shards.iter().all(|s| s.outstanding == 0) {
                self.finished = true;
                return None;
            }
            let completion = self.rx.recv().expect("gather holds its own sender");
            match completion {
                Completion::Item(i, Some(Ok(t))) => {
                    self.shards[i].outstanding -= 1;
                    self.refill = Some(i);
                    return Some(Ok((i, t)));
                }
                Completion::Item(i, Some(Err(e))) => {
                    self.shards[i].outstanding -= 1;
                    self.finished = true;
                    return Some(Err(e));
                }
                Completion::Item(i, None) => {
                    self.shards[i].outstanding -= 1;
                    self.shards[i].exhausted = true;
                }
                Completion::Lost(i) => {
                    self.shards[i].outstanding -= 1;
                    if self.shards[i].exhausted {
                        continue;
                    }
                    if self.shards[i].shard.follow_restart() {
                        self.submit(i);
                        continue;
                    }
                    self.finished = true;
                    let actor = &self.shards[i].shard.actor;
                    let reason = if actor.is_current() {
                        DeliveryFailure::HandlerPanicked
                    } else {
                        DeliveryFailure::Stopped
                    };
                    return Some(Err(StreamError::Actor(ActorError::Delivery {
                        actor: actor.id(),
                        method: "pull".into(),
                        reason,
                    })));
                }
            }
        }
    }
}

/// Which operator produced a [`LocalIter`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Source,
    GatherSync,
    GatherAsync,
    Union,
    UnionAsync,
    Split,
    Transform,
}

type LocalPull<T> = Box<dyn FnMut() -> Option<StreamResult<T>> + Send>;

/// Lazy sequential stream. Single consumer.
pub struct LocalIter<T> {
    pull: LocalPull<T>,
    provenance: Provenance,
    finished: bool,
}

impl<T> fmt::Debug for LocalIter<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LocalIter")
            .field("provenance", &self.provenance)
            .field("finished", &self.finished)
            .finish()
    }
}

impl<T> Iterator for LocalIter<T> {
    type Item = StreamResult<T>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.finished {
            return None;
        }
        let item = (self.pull)();
        match &item {
            None | Some(Err(_)) => self.finished = true,
            Some(Ok(_)) => {}
        }
        item
    }
}

impl<T: Send + 'static> LocalIter<T> {
    pub fn from_pull<F>(provenance: Provenance, pull: F) -> Self
    where
        F: FnMut() -> Option<StreamResult<T>> + Send + 'static,
    {
        LocalIter {
            pull: Box::new(pull),
            provenance,
            finished: false,
        }
    }

    /// Wraps an ordinary iterator of plain items.
    pub fn from_items<I>(items: I) -> Self
    where
        I: IntoIterator<Item = T>,
        I::IntoIter: Send + 'static,
    {
        let mut it = items.into_iter();
        Self::from_pull(Provenance::Source, move || it.next().map(Ok))
    }

    /// Wraps an iterator of already-fallible items.
    pub fn from_results<I>(items: I) -> Self
    where
        I: IntoIterator<Item = StreamResult<T>>,
        I::IntoIter: Send + 'static,
    {
        let mut it = items.into_iter();
        Self::from_pull(Provenance::Source, move || it.next())
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }

    /// Pulls the next item, mapping end-of-stream to [`FlowError::EndOfStream`].
    pub fn next_item(&mut self) -> Result<T, FlowError> {
        match self.next() {
            Some(Ok(t)) => Ok(t),
            Some(Err(e)) => Err(FlowError::Stream(e)),
            None => Err(FlowError::EndOfStream),
        }
    }

    /// Transforms each item in the consumer's context. `f` may hold state.
    pub fn for_each<U, F>(self, mut f: F) -> LocalIter<U>
    where
        U: Send + 'static,
        F: FnMut(T) -> U + Send + 'static,
    {
        self.try_for_each(move |t| Ok(f(t)))
    }

    pub fn try_for_each<U, F>(mut self, mut f: F) -> LocalIter<U>
    where
        U: Send + 'static,
        F: FnMut(T) -> StreamResult<U> + Send + 'static,
    {
        LocalIter::from_pull(Provenance::Transform, move || match self.next()? {
            Ok(t) => Some(f(t)),
            Err(e) => Some(Err(e)),
        })
    }

    /// Drops items for which `keep` is false, pulling upstream until one
    /// passes.
    pub fn filter<F>(mut self, mut keep: F) -> LocalIter<T>
    where
        F: FnMut(&T) -> bool + Send + 'static,
    {
        LocalIter::from_pull(Provenance::Transform, move || loop {
            match self.next()? {
                Ok(t) if !keep(&t) => continue,
                other => return Some(other),
            }
        })
    }

    /// Runs `f` for each upstream item; `f` may emit zero or more outputs.
    pub fn flat_map<U, F>(mut self, mut f: F) -> LocalIter<U>
    where
        U: Send + 'static,
        F: FnMut(T) -> StreamResult<Vec<U>> + Send + 'static,
    {
        let mut pending: VecDeque<U> = VecDeque::new();
        LocalIter::from_pull(Provenance::Transform, move || loop {
            if let Some(u) = pending.pop_front() {
                return Some(Ok(u));
            }
            match self.next()? {
                Ok(t) => match f(t) {
                    Ok(out) => pending.extend(out),
                    Err(e) => return Some(Err(e)),
                },
                Err(e) => return Some(Err(e)),
            }
        })
    }

    /// Deterministic weighted round-robin over `children`. Pulling a child
    /// blocks until it yields; the union ends as soon as any child ends.
    pub fn union(children: Vec<LocalIter<T>>, weights: Vec<f64>) -> Result<LocalIter<T>, FlowError> {
        if children.is_empty() {
            return Err(FlowError::InvalidArgument("union needs at least one child".into()));
        }
        if children.len() != weights.len() {
            return Err(FlowError::InvalidArgument(format!(
                "{} children but {} weights",
                children.len(),
                weights.len()
            )));
        }
        let mut schedule = WeightedRoundRobin::new(&weights)?;
        let mut children = children;
        Ok(LocalIter::from_pull(Provenance::Union, move || {
            let i = schedule.next_index();
            children[i].next()
        }))
    }

    /// Drives every child on its own thread and yields items in completion
    /// order. Ends once all children have ended.
    pub fn union_async(children: Vec<LocalIter<T>>) -> Result<LocalIter<T>, FlowError> {
        if children.is_empty() {
            return Err(FlowError::InvalidArgument("union_async needs at least one child".into()));
        }
        let mut pending = Some(children);
        let mut rx: Option<Receiver<Option<StreamResult<T>>>> = None;
        let mut live = 0usize;
        Ok(LocalIter::from_pull(Provenance::UnionAsync, move || {
            if let Some(children) = pending.take() {
                // Rendezvous channel: each driver runs at most one item
                // ahead of the consumer.
                let (tx, receiver) = mpsc::sync_channel(0);
                live = children.len();
                for (i, child) in children.into_iter().enumerate() {
                    let tx = tx.clone();
                    let spawned = thread::Builder::new()
                        .name(format!("union-async-{i}"))
                        .spawn(move || drive_child(child, tx));
                    if let Err(e) = spawned {
                        return Some(Err(StreamError::msg(format!("union_async driver: {e}"))));
                    }
                }
                rx = Some(receiver);
            }
            let rx = rx.as_ref()?;
            while live > 0 {
                match rx.recv() {
                    Ok(Some(item)) => return Some(item),
                    Ok(None) => live -= 1,
                    Err(_) => return None,
                }
            }
            None
        }))
    }
}

fn drive_child<T>(mut child: LocalIter<T>, tx: mpsc::SyncSender<Option<StreamResult<T>>>) {
    loop {
        match child.next() {
            Some(item) => {
                let is_err = item.is_err();
                if tx.send(Some(item)).is_err() || is_err {
                    return;
                }
            }
            None => {
                let _ = tx.send(None);
                return;
            }
        }
    }
}

impl<T: Clone + Send + 'static> LocalIter<T> {
    /// Duplicates the stream into two branches that each observe every item
    /// in order. A branch may run at most `max_lag` items ahead of the other;
    /// beyond that it blocks until the laggard catches up.
    pub fn split(self, max_lag: usize) -> Result<(LocalIter<T>, LocalIter<T>), FlowError> {
        let (a, b, _) = self.split_observed(max_lag)?;
        Ok((a, b))
    }

    /// [`LocalIter::split`] plus a handle to the buffer occupancy counters.
    pub fn split_observed(self, max_lag: usize) -> Result<(LocalIter<T>, LocalIter<T>, Arc<SplitStats>), FlowError> {
        if max_lag == 0 {
            return Err(FlowError::InvalidArgument("max_lag must be at least 1".into()));
        }
        let stats = Arc::new(SplitStats::default());
        let shared = Arc::new(SplitShared {
            state: Mutex::new(SplitState {
                source: Some(self),
                queues: [VecDeque::new(), VecDeque::new()],
                ended: false,
                pulling: false,
                consumer: [None, None],
                detached: [false, false],
            }),
            changed: Condvar::new(),
            max_lag,
            stats: Arc::clone(&stats),
        });
        let branch = |b: usize| {
            let handle = BranchHandle {
                shared: Arc::clone(&shared),
                branch: b,
            };
            LocalIter::from_pull(Provenance::Split, move || handle.shared.next_for(handle.branch))
        };
        Ok((branch(0), branch(1), stats))
    }
}

/// Occupancy counters of a split's per-branch buffers.
#[derive(Debug, Default)]
pub struct SplitStats {
    buffered: [AtomicUsize; 2],
    peak_buffered: [AtomicUsize; 2],
    delivered: [AtomicUsize; 2],
    source_pulls: AtomicUsize,
}

impl SplitStats {
    pub fn buffered(&self, branch: usize) -> usize {
        self.buffered[branch].load(Ordering::SeqCst)
    }

    pub fn peak_buffered(&self, branch: usize) -> usize {
        self.peak_buffered[branch].load(Ordering::SeqCst)
    }

    pub fn delivered(&self, branch: usize) -> usize {
        self.delivered[branch].load(Ordering::SeqCst)
    }

    pub fn source_pulls(&self) -> usize {
        self.source_pulls.load(Ordering::SeqCst)
    }
}

struct SplitState<T> {
    source: Option<LocalIter<T>>,
    queues: [VecDeque<StreamResult<T>>; 2],
    ended: bool,
    pulling: bool,
    consumer: [Option<ThreadId>; 2],
    detached: [bool; 2],
}

struct SplitShared<T> {
    state: Mutex<SplitState<T>>,
    changed: Condvar,
    max_lag: usize,
    stats: Arc<SplitStats>,
}

/// Detaches its branch when dropped, so the other branch stops buffering
/// for it and never waits on it again.
struct BranchHandle<T> {
    shared: Arc<SplitShared<T>>,
    branch: usize,
}

impl<T> Drop for BranchHandle<T> {
    fn drop(&mut self) {
        let mut st = lock(&self.shared.state);
        st.detached[self.branch] = true;
        st.queues[self.branch].clear();
        self.shared.stats.buffered[self.branch].store(0, Ordering::SeqCst);
        self.shared.changed.notify_all();
    }
}

impl<T: Clone + Send + 'static> SplitShared<T> {
    fn next_for(&self, b: usize) -> Option<StreamResult<T>> {
        let other = 1 - b;
        let me = thread::current().id();
        let mut st = lock(&self.state);
        st.consumer[b] = Some(me);
        loop {
            if let Some(item) = st.queues[b].pop_front() {
                self.stats.buffered[b].store(st.queues[b].len(), Ordering::SeqCst);
                self.stats.delivered[b].fetch_add(1, Ordering::SeqCst);
                self.changed.notify_all();
                return Some(item);
            }
            if st.ended {
                return None;
            }
            if !st.detached[other] && st.queues[other].len() >= self.max_lag {
                if st.consumer[other] == Some(me) {
                    // The laggard is consumed on this very thread, so waiting
                    // for it could never finish.
                    return Some(Err(StreamError::msg(format!(
                        "split: branch {b} is {} items ahead of a branch consumed on the same thread",
                        self.max_lag
                    ))));
                }
                st = wait(&self.changed, st);
                continue;
            }
            if st.pulling {
                st = wait(&self.changed, st);
                continue;
            }
            let mut source = st.source.take().expect("source present when not pulling");
            st.pulling = true;
            drop(st);
            let item = source.next();
            st = lock(&self.state);
            st.source = Some(source);
            st.pulling = false;
            self.stats.source_pulls.fetch_add(1, Ordering::SeqCst);
            match item {
                None => st.ended = true,
                Some(item) => {
                    if item.is_err() {
                        st.ended = true;
                    }
                    if !st.detached[other] {
                        st.queues[other].push_back(item.clone());
                    }
                    st.queues[b].push_back(item);
                    for q in 0..2 {
                        let len = st.queues[q].len();
                        self.stats.buffered[q].store(len, Ordering::SeqCst);
                        self.stats.peak_buffered[q].fetch_max(len, Ordering::SeqCst);
                    }
                }
            }
            self.changed.notify_all();
        }
    }
}

/// Deterministic weighted round-robin. Among the children that are at least
/// `c = 1 / (2k - 2)` pulls behind their share, the one whose next pull is
/// due soonest goes next (ties to the lowest index). This is Tijdeman's
/// chairman-assignment rule: after any `n` picks, child `i` has been picked
/// within `1 - c` of `n * w_i / sum(w)` times.
#[derive(Debug, Clone)]
pub struct WeightedRoundRobin {
    shares: Vec<f64>,
    pulls: Vec<u64>,
    total: u64,
    slack: f64,
}

impl WeightedRoundRobin {
    pub fn new(weights: &[f64]) -> Result<Self, FlowError> {
        if weights.is_empty() {
            return Err(FlowError::InvalidArgument("no weights".into()));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(FlowError::InvalidArgument(format!(
                "weights must be positive and finite, got {weights:?}"
            )));
        }
        let sum: f64 = weights.iter().sum();
        let k = weights.len();
        Ok(WeightedRoundRobin {
            shares: weights.iter().map(|w| w / sum).collect(),
            pulls: vec![0; k],
            total: 0,
            slack: if k > 1 { 1.0 / (2.0 * (k as f64 - 1.0)) } else { 0.0 },
        })
    }

    pub fn next_index(&mut self) -> usize {
        let n = (self.total + 1) as f64;
        let mut best = None;
        let mut best_due = f64::INFINITY;
        for (i, (share, pulls)) in self.shares.iter().zip(&self.pulls).enumerate() {
            let pulls = *pulls as f64;
            if n * share - pulls < self.slack - 1e-9 {
                continue;
            }
            let due = (pulls + 1.0 - self.slack) / share;
            if due < best_due - 1e-12 {
                best = Some(i);
                best_due = due;
            }
        }
        // The rule guarantees an eligible child; rounding can only matter at
        // the boundary, where the most-behind child is the right pick.
        let best = best.unwrap_or_else(|| {
            (0..self.shares.len())
                .max_by(|&a, &b| {
                    let da = n * self.shares[a] - self.pulls[a] as f64;
                    let db = n * self.shares[b] - self.pulls[b] as f64;
                    da.total_cmp(&db).then(b.cmp(&a))
                })
                .unwrap_or(0)
        });
        self.pulls[best] += 1;
        self.total += 1;
        best
    }

    pub fn pulls(&self) -> &[u64] {
        &self.pulls
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn shares(&self) -> &[f64] {
        &self.shares
    }
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

fn wait<'a, T>(cv: &Condvar, guard: MutexGuard<'a, T>) -> MutexGuard<'a, T> {
    cv.wait(guard).unwrap_or_else(|p| p.into_inner())
}
