//! Futures-based dataflow runtime on a fixed work-stealing worker pool.
//!
//! A task is submitted together with the futures it reads. It becomes runnable
//! once every input has resolved, runs exactly once on some worker, and
//! resolves its own output future. A task whose input failed is not run; its
//! output fails with the same error.
//!
//! Each worker owns a LIFO deque; idle workers steal FIFO from the others and
//! from a global injector that receives submissions from non-worker threads.
//!
//! Task bodies must not block on futures. Blocking [`TaskFuture::wait`] is for
//! the driver thread only.

use std::any::Any;
use std::cell::RefCell;
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_deque::{Injector, Steal, Stealer, Worker};

use crate::error::{Error, Result};

type Callback = Box<dyn FnOnce() + Send>;
type Job = Box<dyn FnOnce(usize) + Send>;

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    // Task panics are caught before they can poison runtime locks.
    m.lock().unwrap_or_else(|e| e.into_inner())
}

enum State<T> {
    Pending(Vec<Callback>),
    Ready(Arc<T>),
    Failed(Error),
}

struct Shared<T> {
    state: Mutex<State<T>>,
    resolved: Condvar,
    producer: Option<u64>,
}

/// Handle to a value produced asynchronously. Cloning is cheap; every clone
/// observes the same single resolution.
pub struct TaskFuture<T> {
    shared: Arc<Shared<T>>,
}

impl<T> Clone for TaskFuture<T> {
    fn clone(&self) -> Self {
        Self { shared: Arc::clone(&self.shared) }
    }
}

impl<T> fmt::Debug for TaskFuture<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let state = match &*lock(&self.shared.state) {
            State::Pending(_) => "pending",
            State::Ready(_) => "ready",
            State::Failed(_) => "failed",
        };
        f.debug_struct("TaskFuture").field("producer", &self.shared.producer).field("state", &state).finish()
    }
}

impl<T: Send + Sync + 'static> TaskFuture<T> {
    fn pending(producer: Option<u64>) -> Self {
        Self {
            shared: Arc::new(Shared {
                state: Mutex::new(State::Pending(Vec::new())),
                resolved: Condvar::new(),
                producer,
            }),
        }
    }

    /// Future that is already resolved to `value`.
    pub fn ready(value: T) -> Self {
        Self::from_arc(Arc::new(value))
    }

    pub fn from_arc(value: Arc<T>) -> Self {
        Self {
            shared: Arc::new(Shared {
                state: Mutex::new(State::Ready(value)),
                resolved: Condvar::new(),
                producer: None,
            }),
        }
    }

    /// Future that has already failed.
    pub fn failed(error: Error) -> Self {
        Self {
            shared: Arc::new(Shared {
                state: Mutex::new(State::Failed(error)),
                resolved: Condvar::new(),
                producer: None,
            }),
        }
    }

    fn resolve(&self, result: Result<T>) {
        let new_state = match result {
            Ok(v) => State::Ready(Arc::new(v)),
            Err(e) => State::Failed(e),
        };
        let callbacks = {
            let mut state = lock(&self.shared.state);
            match std::mem::replace(&mut *state, new_state) {
                State::Pending(cbs) => cbs,
                _ => unreachable!("future resolved twice"),
            }
        };
        self.shared.resolved.notify_all();
        for cb in callbacks {
            cb();
        }
    }

    /// Id of the task producing this value, `None` for ready-made futures.
    pub fn producer(&self) -> Option<u64> {
        self.shared.producer
    }

    pub fn is_resolved(&self) -> bool {
        !matches!(&*lock(&self.shared.state), State::Pending(_))
    }

    /// Blocks until resolution and returns the value or the propagated error.
    pub fn wait(&self) -> Result<Arc<T>> {
        let mut state = lock(&self.shared.state);
        loop {
            match &*state {
                State::Ready(v) => return Ok(Arc::clone(v)),
                State::Failed(e) => return Err(e.clone()),
                State::Pending(_) => {
                    state = self.shared.resolved.wait(state).unwrap_or_else(|e| e.into_inner());
                }
            }
        }
    }

    fn take_resolved(&self) -> Result<Arc<T>> {
        match &*lock(&self.shared.state) {
            State::Ready(v) => Ok(Arc::clone(v)),
            State::Failed(e) => Err(e.clone()),
            State::Pending(_) => unreachable!("dependency read before resolution"),
        }
    }
}

/// Waits for every future; on failure returns the error of the first failed
/// future in list order.
pub fn wait_all<T: Send + Sync + 'static>(futures: &[TaskFuture<T>]) -> Result<Vec<Arc<T>>> {
    let mut out = Vec::with_capacity(futures.len());
    let mut first_err = None;
    for f in futures {
        match f.wait() {
            Ok(v) => out.push(v),
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    match first_err {
        Some(e) => Err(e),
        None => Ok(out),
    }
}

/// Type-erased view of a future used for dependency bookkeeping.
pub trait Dependency {
    /// Runs `cb` once the future resolves (immediately if it already has).
    fn subscribe(&self, cb: Callback);
    fn producer(&self) -> Option<u64>;
}

impl<T: Send + Sync + 'static> Dependency for TaskFuture<T> {
    fn subscribe(&self, cb: Callback) {
        let mut state = lock(&self.shared.state);
        match &mut *state {
            State::Pending(cbs) => cbs.push(cb),
            _ => {
                drop(state);
                cb();
            }
        }
    }

    fn producer(&self) -> Option<u64> {
        self.shared.producer
    }
}

/// A set of input futures and the shape of their resolved values.
pub trait DepSet: Send + 'static {
    type Values: Send + 'static;

    fn visit(&self, f: &mut dyn FnMut(&dyn Dependency));

    /// Resolved values, or the first failure in declaration order.
    fn values(&self) -> Result<Self::Values>;
}

impl DepSet for () {
    type Values = ();

    fn visit(&self, _f: &mut dyn FnMut(&dyn Dependency)) {}

    fn values(&self) -> Result<()> {
        Ok(())
    }
}

impl<T: Send + Sync + 'static> DepSet for TaskFuture<T> {
    type Values = Arc<T>;

    fn visit(&self, f: &mut dyn FnMut(&dyn Dependency)) {
        f(self)
    }

    fn values(&self) -> Result<Arc<T>> {
        self.take_resolved()
    }
}

impl<T: Send + Sync + 'static> DepSet for Vec<TaskFuture<T>> {
    type Values = Vec<Arc<T>>;

    fn visit(&self, f: &mut dyn FnMut(&dyn Dependency)) {
        for d in self {
            f(d)
        }
    }

    fn values(&self) -> Result<Vec<Arc<T>>> {
        self.iter().map(TaskFuture::take_resolved).collect()
    }
}

macro_rules! tuple_depset {
    ($($name:ident),+) => {
        impl<$($name: DepSet),+> DepSet for ($($name,)+) {
            type Values = ($($name::Values,)+);

            #[allow(non_snake_case)]
            fn visit(&self, f: &mut dyn FnMut(&dyn Dependency)) {
                let ($($name,)+) = self;
                $($name.visit(f);)+
            }

            #[allow(non_snake_case)]
            fn values(&self) -> Result<Self::Values> {
                let ($($name,)+) = self;
                Ok(($($name.values()?,)+))
            }
        }
    };
}

tuple_depset!(A);
tuple_depset!(A, B);
tuple_depset!(A, B, C);
tuple_depset!(A, B, C, D);
tuple_depset!(A, B, C, D, E);

/// Kind and tile coordinates of a task, for traces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskLabel {
    pub kind: &'static str,
    coords: [u32; 3],
    len: u8,
}

impl TaskLabel {
    pub fn new(kind: &'static str, coords: &[usize]) -> Self {
        assert!(coords.len() <= 3, "at most three tile coordinates");
        let mut c = [0u32; 3];
        for (slot, &v) in c.iter_mut().zip(coords) {
            *slot = v as u32;
        }
        Self { kind, coords: c, len: coords.len() as u8 }
    }

    pub fn coords(&self) -> &[u32] {
        &self.coords[..self.len as usize]
    }
}

/// One executed task.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceEvent {
    pub task_id: u64,
    pub label: TaskLabel,
    pub deps: Vec<u64>,
    pub worker: usize,
    pub start_ns: u64,
    pub end_ns: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolConfig {
    pub workers: usize,
    /// Record a [`TraceEvent`] per task.
    pub trace: bool,
}

impl PoolConfig {
    pub fn new(workers: usize) -> Self {
        Self { workers, trace: false }
    }

    pub fn with_trace(mut self, trace: bool) -> Self {
        self.trace = trace;
        self
    }
}

/// Counters reported by [`Runtime::stats`] and [`Runtime::shutdown`].
#[derive(Debug, Clone, PartialEq)]
pub struct RunStats {
    /// Task bodies run to completion (successfully or with an error).
    pub tasks_executed: u64,
    /// Tasks failed because an input had failed; their bodies never ran.
    pub tasks_skipped: u64,
    pub per_worker: Vec<u64>,
    pub wall_time: Duration,
}

struct Inner {
    id: usize,
    injector: Injector<Job>,
    stealers: Vec<Stealer<Job>>,
    epoch: Mutex<u64>,
    wake: Condvar,
    shutdown: AtomicBool,
    next_task: AtomicU64,
    executed: AtomicU64,
    skipped: AtomicU64,
    per_worker: Vec<AtomicU64>,
    trace: Option<Mutex<Vec<TraceEvent>>>,
    clock: Instant,
}

static NEXT_POOL: AtomicUsize = AtomicUsize::new(0);

struct LocalQueue {
    pool: usize,
    index: usize,
    queue: Worker<Job>,
}

thread_local! {
    static LOCAL: RefCell<Option<LocalQueue>> = const { RefCell::new(None) };
}

impl Inner {
    fn push(&self, job: Job) {
        let leftover = LOCAL.with(|cell| {
            let local = cell.borrow();
            match local.as_ref() {
                Some(lq) if lq.pool == self.id => {
                    lq.queue.push(job);
                    None
                }
                _ => Some(job),
            }
        });
        if let Some(job) = leftover {
            self.injector.push(job);
        }
        *lock(&self.epoch) += 1;
        self.wake.notify_one();
    }

    fn find_job(&self, local: &Worker<Job>, index: usize) -> Option<Job> {
        if let Some(job) = local.pop() {
            return Some(job);
        }
        loop {
            let mut retry = false;
            match self.injector.steal_batch_and_pop(local) {
                Steal::Success(job) => return Some(job),
                Steal::Retry => retry = true,
                Steal::Empty => {}
            }
            let n = self.stealers.len();
            for off in 1..n {
                match self.stealers[(index + off) % n].steal() {
                    Steal::Success(job) => return Some(job),
                    Steal::Retry => retry = true,
                    Steal::Empty => {}
                }
            }
            if !retry {
                return None;
            }
        }
    }

    fn now_ns(&self) -> u64 {
        self.clock.elapsed().as_nanos() as u64
    }
}

fn worker_loop(inner: Arc<Inner>, index: usize, queue: Worker<Job>) {
    LOCAL.with(|cell| {
        *cell.borrow_mut() = Some(LocalQueue { pool: inner.id, index, queue });
    });
    let pop = |inner: &Inner| {
        LOCAL.with(|cell| {
            let local = cell.borrow();
            let lq = local.as_ref().expect("worker queue installed");
            inner.find_job(&lq.queue, lq.index)
        })
    };
    loop {
        let seen = *lock(&inner.epoch);
        if let Some(job) = pop(&inner) {
            job(index);
            continue;
        }
        let mut epoch = lock(&inner.epoch);
        while *epoch == seen && !inner.shutdown.load(Ordering::Acquire) {
            epoch = inner.wake.wait(epoch).unwrap_or_else(|e| e.into_inner());
        }
        if *epoch == seen && inner.shutdown.load(Ordering::Acquire) {
            break;
        }
    }
    LOCAL.with(|cell| *cell.borrow_mut() = None);
}

/// A running worker pool. Clones share the same pool.
#[derive(Clone)]
pub struct Runtime {
    inner: Arc<Inner>,
    threads: Arc<PoolGuard>,
    workers: usize,
}

/// Joins the workers when the last `Runtime` clone goes away.
struct PoolGuard {
    inner: Arc<Inner>,
    handles: Mutex<Vec<JoinHandle<()>>>,
}

impl PoolGuard {
    fn stop(&self) {
        self.inner.shutdown.store(true, Ordering::Release);
        *lock(&self.inner.epoch) += 1;
        self.inner.wake.notify_all();
        let handles = std::mem::take(&mut *lock(&self.handles));
        for h in handles {
            let _ = h.join();
        }
    }
}

impl Drop for PoolGuard {
    fn drop(&mut self) {
        self.stop();
    }
}

impl fmt::Debug for Runtime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Runtime").field("workers", &self.workers).finish()
    }
}

struct PendingTask {
    remaining: AtomicUsize,
    job: Mutex<Option<Job>>,
}

fn panic_message(payload: Box<dyn Any + Send>) -> String {
    if let Some(s) = payload.downcast_ref::<&str>() {
        (*s).to_string()
    } else if let Some(s) = payload.downcast_ref::<String>() {
        s.clone()
    } else {
        "non-string panic payload".to_string()
    }
}

impl Runtime {
    /// Starts `cfg.workers` worker threads.
    pub fn start(cfg: PoolConfig) -> Result<Self> {
        if cfg.workers == 0 {
            return Err(Error::ZeroWorkers);
        }
        let hw = thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
        if cfg.workers > hw {
            log::warn!(
                "{} workers requested on a host with {hw} hardware threads; expect oversubscription",
                cfg.workers
            );
        }
        let queues: Vec<Worker<Job>> = (0..cfg.workers).map(|_| Worker::new_lifo()).collect();
        let inner = Arc::new(Inner {
            id: NEXT_POOL.fetch_add(1, Ordering::Relaxed),
            injector: Injector::new(),
            stealers: queues.iter().map(Worker::stealer).collect(),
            epoch: Mutex::new(0),
            wake: Condvar::new(),
            shutdown: AtomicBool::new(false),
            next_task: AtomicU64::new(0),
            executed: AtomicU64::new(0),
            skipped: AtomicU64::new(0),
            per_worker: (0..cfg.workers).map(|_| AtomicU64::new(0)).collect(),
            trace: cfg.trace.then(|| Mutex::new(Vec::new())),
            clock: Instant::now(),
        });
        let mut threads = Vec::with_capacity(cfg.workers);
        for (index, queue) in queues.into_iter().enumerate() {
            let inner = Arc::clone(&inner);
            let handle = thread::Builder::new()
                .name(format!("gprs-worker-{index}"))
                .spawn(move || worker_loop(inner, index, queue))
                .map_err(Error::from)?;
            threads.push(handle);
        }
        let guard = PoolGuard { inner: Arc::clone(&inner), handles: Mutex::new(threads) };
        Ok(Self { inner, threads: Arc::new(guard), workers: cfg.workers })
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    pub fn is_shut_down(&self) -> bool {
        self.inner.shutdown.load(Ordering::Acquire)
    }

    /// Schedules `body` to run once every future in `deps` has resolved.
    ///
    /// The body receives the resolved values. If any input failed, the body
    /// is skipped and the returned future fails with the first failure in
    /// declaration order. Panics inside the body become
    /// [`Error::TaskPanicked`].
    pub fn dataflow<D, T, F>(&self, label: TaskLabel, deps: D, body: F) -> TaskFuture<T>
    where
        D: DepSet,
        T: Send + Sync + 'static,
        F: FnOnce(D::Values) -> Result<T> + Send + 'static,
    {
        if self.is_shut_down() {
            return TaskFuture::failed(Error::PoolShutdown);
        }
        let task_id = self.inner.next_task.fetch_add(1, Ordering::Relaxed);
        let output = TaskFuture::pending(Some(task_id));

        let pending = Arc::new(PendingTask {
            remaining: AtomicUsize::new(1),
            job: Mutex::new(None),
        });
        let tracing = self.inner.trace.is_some();
        let mut dep_ids = Vec::new();
        deps.visit(&mut |d| {
            if tracing {
                if let Some(p) = d.producer() {
                    dep_ids.push(p);
                }
            }
            pending.remaining.fetch_add(1, Ordering::Relaxed);
            let inner = Arc::clone(&self.inner);
            let pending = Arc::clone(&pending);
            d.subscribe(Box::new(move || release(&inner, &pending)));
        });

        let inner = Arc::clone(&self.inner);
        let out = output.clone();
        let job: Job = Box::new(move |worker| {
            let start_ns = inner.now_ns();
            let result = match deps.values() {
                Err(e) => {
                    inner.skipped.fetch_add(1, Ordering::Relaxed);
                    Err(e)
                }
                Ok(values) => {
                    let r = panic::catch_unwind(AssertUnwindSafe(move || body(values)))
                        .unwrap_or_else(|p| Err(Error::TaskPanicked(panic_message(p))));
                    inner.executed.fetch_add(1, Ordering::Relaxed);
                    inner.per_worker[worker].fetch_add(1, Ordering::Relaxed);
                    r
                }
            };
            if let Some(trace) = &inner.trace {
                let end_ns = inner.now_ns();
                lock(trace).push(TraceEvent { task_id, label, deps: dep_ids, worker, start_ns, end_ns });
            }
            out.resolve(result);
        });
        *lock(&pending.job) = Some(job);
        release(&self.inner, &pending);
        output
    }

    /// Counters accumulated since the pool started.
    pub fn stats(&self) -> RunStats {
        RunStats {
            tasks_executed: self.inner.executed.load(Ordering::Acquire),
            tasks_skipped: self.inner.skipped.load(Ordering::Acquire),
            per_worker: self.inner.per_worker.iter().map(|c| c.load(Ordering::Acquire)).collect(),
            wall_time: self.inner.clock.elapsed(),
        }
    }

    /// Drains the recorded trace (empty when tracing is off).
    pub fn take_trace(&self) -> Vec<TraceEvent> {
        match &self.inner.trace {
            Some(t) => {
                let mut events = std::mem::take(&mut *lock(t));
                events.sort_by_key(|e| e.task_id);
                events
            }
            None => Vec::new(),
        }
    }

    /// Stops accepting work, lets the workers drain their queues and joins
    /// them. Later submissions fail with [`Error::PoolShutdown`].
    pub fn shutdown(&self) -> RunStats {
        self.threads.stop();
        self.stats()
    }
}

fn release(inner: &Inner, pending: &PendingTask) {
    if pending.remaining.fetch_sub(1, Ordering::AcqRel) == 1 {
        let job = lock(&pending.job).take().expect("task released twice");
        inner.push(job);
    }
}

/// Writes one line per event:
/// `task_id kind tile_coords worker t_start_ns t_end_ns`, coordinates joined
/// with `:` (`-` when the task has none).
pub fn write_trace(events: &[TraceEvent], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "# task_id kind tile_coords worker t_start_ns t_end_ns")?;
    for e in events {
        let coords = if e.label.coords().is_empty() {
            "-".to_string()
        } else {
            e.label.coords().iter().map(u32::to_string).collect::<Vec<_>>().join(":")
        };
        writeln!(w, "{} {} {} {} {} {}", e.task_id, e.label.kind, coords, e.worker, e.start_ns, e.end_ns)?;
    }
    w.flush()?;
    Ok(())
}
