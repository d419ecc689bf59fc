//! In-process actor substrate.
//!
//! Every actor owns its state on a dedicated thread and handles one message at
//! a time. Messages are closures over the actor state, so a call site reads
//! like a method call (`worker.call("get_weights", |w| w.weights())`) while
//! the state itself never leaves the actor's thread.
//!
//! Delivery guarantees:
//!
//! * messages from one sender to one actor are handled in send order;
//! * ordering between *different* senders is whatever order they reach the
//!   mailbox, no global order is promised;
//! * restarting an actor drops whatever was still queued for the old
//!   incarnation; the corresponding [`ReplyHandle`]s resolve with
//!   [`ActorError::Delivery`] instead of hanging.

use std::any::type_name;
use std::borrow::Cow;
use std::fmt;
use std::panic::{self, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicU8, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, SyncSender, TryRecvError};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::Duration;

/// Mailbox capacity used by [`Runtime::new`]. Senders block when it is full.
pub const DEFAULT_MAILBOX_CAPACITY: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ActorId(u64);

impl ActorId {
    pub fn get(self) -> u64 {
        self.0
    }
}

impl fmt::Display for ActorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ActorKind {
    RolloutWorker,
    ReplayActor,
    Custom,
}

/// Why a message never produced a reply.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeliveryFailure {
    /// The addressed incarnation was replaced by [`Runtime::restart_actor`].
    Restarted,
    /// The runtime was shut down.
    Stopped,
    /// The handler panicked while processing the message.
    HandlerPanicked,
}

impl fmt::Display for DeliveryFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DeliveryFailure::Restarted => "actor was restarted",
            DeliveryFailure::Stopped => "actor is stopped",
            DeliveryFailure::HandlerPanicked => "handler panicked",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ActorError {
    #[error("failed to spawn actor: {0}")]
    Spawn(String),
    #[error("message `{method}` to actor {actor} was not delivered: {reason}")]
    Delivery {
        actor: ActorId,
        method: String,
        reason: DeliveryFailure,
    },
}

impl ActorError {
    /// True when the failure was caused by a restart, i.e. retrying against
    /// [`ActorRef::latest`] can succeed.
    pub fn is_restart(&self) -> bool {
        matches!(
            self,
            ActorError::Delivery {
                reason: DeliveryFailure::Restarted,
                ..
            }
        )
    }
}

const ALIVE: u8 = 0;
const RESTARTED: u8 = 1;
const STOPPED: u8 = 2;

#[derive(Default)]
struct Stats {
    next_actor_id: AtomicU64,
    next_message_id: AtomicU64,
    processed: AtomicU64,
}

trait Stoppable: Send + Sync {
    fn stop(&self);
}

struct RuntimeInner {
    mailbox_capacity: usize,
    stats: Arc<Stats>,
    shut_down: AtomicBool,
    actors: Mutex<Vec<Arc<dyn Stoppable>>>,
}

impl RuntimeInner {
    fn shutdown(&self) {
        if self.shut_down.swap(true, Ordering::SeqCst) {
            return;
        }
        let actors = std::mem::take(&mut *lock(&self.actors));
        for actor in actors {
            actor.stop();
        }
    }
}

impl Drop for RuntimeInner {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// Owner of a set of actors. Cloning yields another handle to the same
/// runtime; the actors are stopped when [`Runtime::shutdown`] is called or the
/// last handle is dropped.
#[derive(Clone)]
pub struct Runtime {
    inner: Arc<RuntimeInner>,
}

impl Default for Runtime {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Runtime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Runtime")
            .field("mailbox_capacity", &self.inner.mailbox_capacity)
            .field("messages_processed", &self.messages_processed())
            .finish()
    }
}

impl Runtime {
    pub fn new() -> Self {
        Self::with_mailbox_capacity(DEFAULT_MAILBOX_CAPACITY)
    }

    pub fn with_mailbox_capacity(capacity: usize) -> Self {
        Runtime {
            inner: Arc::new(RuntimeInner {
                mailbox_capacity: capacity.max(1),
                stats: Arc::new(Stats::default()),
                shut_down: AtomicBool::new(false),
                actors: Mutex::new(Vec::new()),
            }),
        }
    }

    /// Spawns an actor whose state is built by `init`. The same constructor
    /// is re-run on every restart.
    pub fn spawn<S, F>(&self, kind: ActorKind, init: F) -> Result<ActorRef<S>, ActorError>
    where
        S: 'static,
        F: Fn() -> S + Send + Sync + 'static,
    {
        if self.inner.shut_down.load(Ordering::SeqCst) {
            return Err(ActorError::Spawn("runtime is shut down".into()));
        }
        let id = ActorId(self.inner.stats.next_actor_id.fetch_add(1, Ordering::Relaxed));
        let slot = Arc::new(Slot {
            id,
            kind,
            init: Arc::new(init),
            capacity: self.inner.mailbox_capacity,
            stats: Arc::clone(&self.inner.stats),
            current: Mutex::new(None),
            retired: Mutex::new(Vec::new()),
        });
        let incarnation = slot.start(0)?;
        lock(&self.inner.actors).push(slot.clone() as Arc<dyn Stoppable>);
        Ok(ActorRef { slot, incarnation })
    }

    /// Spawns an actor from a cloneable initial state.
    pub fn spawn_actor<S>(&self, kind: ActorKind, init_state: S) -> Result<ActorRef<S>, ActorError>
    where
        S: Clone + Send + Sync + 'static,
    {
        self.spawn(kind, move || init_state.clone())
    }

    /// Replaces the actor's current incarnation with a fresh one built from
    /// its constructor. Messages still queued for the old incarnation are
    /// dropped and their handles fail with [`DeliveryFailure::Restarted`].
    pub fn restart_actor<S: 'static>(&self, actor: &ActorRef<S>) -> Result<ActorRef<S>, ActorError> {
        if self.inner.shut_down.load(Ordering::SeqCst) {
            return Err(ActorError::Spawn("runtime is shut down".into()));
        }
        let incarnation = actor.slot.restart()?;
        Ok(ActorRef {
            slot: Arc::clone(&actor.slot),
            incarnation,
        })
    }

    /// Total number of message handlers executed by actors of this runtime.
    pub fn messages_processed(&self) -> u64 {
        self.inner.stats.processed.load(Ordering::SeqCst)
    }

    /// Stops every actor and joins their threads. Idempotent.
    pub fn shutdown(&self) {
        self.inner.shutdown();
    }

    pub fn is_shut_down(&self) -> bool {
        self.inner.shut_down.load(Ordering::SeqCst)
    }
}

type Handler<S> = Box<dyn FnOnce(&mut S) + Send>;

struct Envelope<S> {
    run: Handler<S>,
}

struct Incarnation<S> {
    number: u64,
    sender: SyncSender<Envelope<S>>,
    liveness: Arc<AtomicU8>,
    thread: JoinHandle<()>,
}

struct Slot<S> {
    id: ActorId,
    kind: ActorKind,
    init: Arc<dyn Fn() -> S + Send + Sync>,
    capacity: usize,
    stats: Arc<Stats>,
    current: Mutex<Option<Incarnation<S>>>,
    retired: Mutex<Vec<JoinHandle<()>>>,
}

impl<S: 'static> Slot<S> {
    fn start(&self, number: u64) -> Result<u64, ActorError> {
        let (sender, receiver) = mpsc::sync_channel::<Envelope<S>>(self.capacity);
        let liveness = Arc::new(AtomicU8::new(ALIVE));
        let init = Arc::clone(&self.init);
        let stats = Arc::clone(&self.stats);
        let thread_liveness = Arc::clone(&liveness);
        let thread = thread::Builder::new()
            .name(format!("actor-{}-{}", self.id.0, number))
            .spawn(move || actor_loop(init, receiver, thread_liveness, stats))
            .map_err(|e| ActorError::Spawn(e.to_string()))?;
        *lock(&self.current) = Some(Incarnation {
            number,
            sender,
            liveness,
            thread,
        });
        Ok(number)
    }

    fn restart(&self) -> Result<u64, ActorError> {
        let mut current = lock(&self.current);
        let next = match current.take() {
            Some(old) => {
                old.liveness.store(RESTARTED, Ordering::SeqCst);
                lock(&self.retired).push(old.thread);
                old.number + 1
            }
            None => return Err(ActorError::Spawn(format!("actor {} is stopped", self.id))),
        };
        drop(current);
        self.start(next)
    }

    fn sender_for(&self, incarnation: u64) -> Result<(SyncSender<Envelope<S>>, Arc<AtomicU8>), DeliveryFailure> {
        match &*lock(&self.current) {
            Some(inc) if inc.number == incarnation => Ok((inc.sender.clone(), Arc::clone(&inc.liveness))),
            Some(_) => Err(DeliveryFailure::Restarted),
            None => Err(DeliveryFailure::Stopped),
        }
    }
}

impl<S: 'static> Stoppable for Slot<S> {
    fn stop(&self) {
        let current = lock(&self.current).take();
        let mut threads = std::mem::take(&mut *lock(&self.retired));
        if let Some(inc) = current {
            inc.liveness.store(STOPPED, Ordering::SeqCst);
            drop(inc.sender);
            threads.push(inc.thread);
        }
        for t in threads {
            if t.thread().id() != thread::current().id() {
                let _ = t.join();
            }
        }
    }
}

fn actor_loop<S>(
    init: Arc<dyn Fn() -> S + Send + Sync>,
    mailbox: Receiver<Envelope<S>>,
    liveness: Arc<AtomicU8>,
    stats: Arc<Stats>,
) {
    let mut state = init();
    drop(init);
    while let Ok(envelope) = mailbox.recv() {
        if liveness.load(Ordering::SeqCst) != ALIVE {
            // Dropping the envelope resolves its reply handle as undelivered.
            continue;
        }
        stats.processed.fetch_add(1, Ordering::SeqCst);
        (envelope.run)(&mut state);
    }
}

/// A named request for an actor: a method label plus the closure run against
/// the actor's state.
pub struct Message<S, R> {
    pub method: Cow<'static, str>,
    handler: Box<dyn FnOnce(&mut S) -> R + Send>,
}

impl<S, R> Message<S, R> {
    pub fn new<F>(method: impl Into<Cow<'static, str>>, handler: F) -> Self
    where
        F: FnOnce(&mut S) -> R + Send + 'static,
    {
        Message {
            method: method.into(),
            handler: Box::new(handler),
        }
    }
}

/// Address of one incarnation of an actor.
pub struct ActorRef<S> {
    slot: Arc<Slot<S>>,
    incarnation: u64,
}

impl<S> Clone for ActorRef<S> {
    fn clone(&self) -> Self {
        ActorRef {
            slot: Arc::clone(&self.slot),
            incarnation: self.incarnation,
        }
    }
}

impl<S> fmt::Debug for ActorRef<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ActorRef")
            .field("id", &self.slot.id)
            .field("kind", &self.slot.kind)
            .field("incarnation", &self.incarnation)
            .field("state", &type_name::<S>())
            .finish()
    }
}

impl<S: 'static> ActorRef<S> {
    pub fn id(&self) -> ActorId {
        self.slot.id
    }

    pub fn kind(&self) -> ActorKind {
        self.slot.kind
    }

    pub fn incarnation(&self) -> u64 {
        self.incarnation
    }

    /// True while this reference addresses the running incarnation.
    pub fn is_current(&self) -> bool {
        matches!(&*lock(&self.slot.current), Some(inc) if inc.number == self.incarnation)
    }

    /// Reference to the newest incarnation of the same actor.
    pub fn latest(&self) -> ActorRef<S> {
        let incarnation = lock(&self.slot.current)
            .as_ref()
            .map_or(self.incarnation, |inc| inc.number);
        ActorRef {
            slot: Arc::clone(&self.slot),
            incarnation,
        }
    }

    /// Enqueues `msg`; blocks while the mailbox is full. The returned handle
    /// resolves once the actor has processed the message. Dropping the
    /// handle without waiting is how a caller sends without expecting a
    /// reply.
    pub fn send_msg<R: Send + 'static>(&self, msg: Message<S, R>) -> ReplyHandle<R> {
        let message_id = self.slot.stats.next_message_id.fetch_add(1, Ordering::Relaxed);
        let (reply_tx, reply_rx) = mpsc::channel::<Result<R, DeliveryFailure>>();
        let mut handle = ReplyHandle {
            actor: self.slot.id,
            method: msg.method.to_string(),
            message_id,
            receiver: None,
            liveness: None,
            state: ReplyState::Pending,
        };
        let (sender, liveness) = match self.slot.sender_for(self.incarnation) {
            Ok(pair) => pair,
            Err(reason) => {
                handle.state = ReplyState::Failed(handle.error(reason));
                return handle;
            }
        };
        let handler = msg.handler;
        let run: Handler<S> = Box::new(move |state: &mut S| {
            let outcome = panic::catch_unwind(AssertUnwindSafe(|| handler(state)));
            let _ = reply_tx.send(outcome.map_err(|_| DeliveryFailure::HandlerPanicked));
        });
        if sender.send(Envelope { run }).is_err() {
            handle.state = ReplyState::Failed(handle.error(DeliveryFailure::Stopped));
            return handle;
        }
        handle.receiver = Some(reply_rx);
        handle.liveness = Some(liveness);
        handle
    }

    /// Request/reply shorthand for [`ActorRef::send_msg`].
    pub fn call<R, F>(&self, method: &'static str, f: F) -> ReplyHandle<R>
    where
        R: Send + 'static,
        F: FnOnce(&mut S) -> R + Send + 'static,
    {
        self.send_msg(Message::new(method, f))
    }

    /// Sends and immediately waits for the reply.
    pub fn ask<R, F>(&self, method: &'static str, f: F) -> Result<R, ActorError>
    where
        R: Send + 'static,
        F: FnOnce(&mut S) -> R + Send + 'static,
    {
        self.call(method, f).into_result()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReplyStatus {
    Pending,
    Done,
    Failed,
}

enum ReplyState<R> {
    Pending,
    Done(R),
    Failed(ActorError),
}

/// Future reply of a message. Resolves exactly once; later waits return the
/// cached outcome.
pub struct ReplyHandle<R> {
    actor: ActorId,
    method: String,
    message_id: u64,
    receiver: Option<Receiver<Result<R, DeliveryFailure>>>,
    liveness: Option<Arc<AtomicU8>>,
    state: ReplyState<R>,
}

impl<R> fmt::Debug for ReplyHandle<R> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ReplyHandle")
            .field("actor", &self.actor)
            .field("method", &self.method)
            .field("message_id", &self.message_id)
            .finish()
    }
}

impl<R> ReplyHandle<R> {
    pub fn message_id(&self) -> u64 {
        self.message_id
    }

    pub fn actor(&self) -> ActorId {
        self.actor
    }

    fn error(&self, reason: DeliveryFailure) -> ActorError {
        ActorError::Delivery {
            actor: self.actor,
            method: self.method.clone(),
            reason,
        }
    }

    fn disconnect_reason(&self) -> DeliveryFailure {
        match self.liveness.as_ref().map(|l| l.load(Ordering::SeqCst)) {
            Some(RESTARTED) => DeliveryFailure::Restarted,
            _ => DeliveryFailure::Stopped,
        }
    }

    fn settle(&mut self, outcome: Result<Result<R, DeliveryFailure>, ()>) {
        self.receiver = None;
        self.state = match outcome {
            Ok(Ok(value)) => ReplyState::Done(value),
            Ok(Err(reason)) => ReplyState::Failed(self.error(reason)),
            Err(()) => ReplyState::Failed(self.error(self.disconnect_reason())),
        };
    }

    /// Non-blocking status check.
    pub fn status(&mut self) -> ReplyStatus {
        if let Some(rx) = &self.receiver {
            match rx.try_recv() {
                Ok(outcome) => self.settle(Ok(outcome)),
                Err(TryRecvError::Disconnected) => self.settle(Err(())),
                Err(TryRecvError::Empty) => {}
            }
        }
        match self.state {
            ReplyState::Pending => ReplyStatus::Pending,
            ReplyState::Done(_) => ReplyStatus::Done,
            ReplyState::Failed(_) => ReplyStatus::Failed,
        }
    }

    fn block(&mut self, timeout: Option<Duration>) -> bool {
        if let Some(rx) = &self.receiver {
            match timeout {
                None => {
                    let outcome = rx.recv().map_err(|_| ());
                    self.settle(outcome);
                }
                Some(t) => match rx.recv_timeout(t) {
                    Ok(outcome) => self.settle(Ok(outcome)),
                    Err(RecvTimeoutError::Disconnected) => self.settle(Err(())),
                    Err(RecvTimeoutError::Timeout) => return false,
                },
            }
        }
        true
    }

    /// Blocks until the reply arrives. Waiting again returns the same value.
    pub fn wait(&mut self) -> Result<&R, ActorError> {
        self.block(None);
        match &self.state {
            ReplyState::Done(v) => Ok(v),
            ReplyState::Failed(e) => Err(e.clone()),
            ReplyState::Pending => unreachable!("reply handle still pending after blocking wait"),
        }
    }

    /// Like [`ReplyHandle::wait`] but gives up after `timeout`, returning
    /// `None` if the reply is still pending.
    pub fn wait_timeout(&mut self, timeout: Duration) -> Option<Result<&R, ActorError>> {
        if !self.block(Some(timeout)) {
            return None;
        }
        Some(match &self.state {
            ReplyState::Done(v) => Ok(v),
            ReplyState::Failed(e) => Err(e.clone()),
            ReplyState::Pending => return None,
        })
    }

    pub fn into_result(mut self) -> Result<R, ActorError> {
        self.block(None);
        match std::mem::replace(&mut self.state, ReplyState::Pending) {
            ReplyState::Done(v) => Ok(v),
            ReplyState::Failed(e) => Err(e),
            ReplyState::Pending => unreachable!("reply handle still pending after blocking wait"),
        }
    }
}

/// Waits for every handle, in order, returning the first failure.
pub fn wait_all<R>(handles: Vec<ReplyHandle<R>>) -> Result<Vec<R>, ActorError> {
    handles.into_iter().map(ReplyHandle::into_result).collect()
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
}
