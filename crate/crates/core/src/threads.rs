//! Worker pool with a reconfigurable group view.
//!
//! The pool owns a fixed set of workers created up front. Logically the
//! workers are split into contiguous groups: group `g` holds threads
//! `[prefix(g), prefix(g + 1))`. Each group has its own local barrier and the
//! whole pool shares one global barrier.
//!
//! Jobs are closures run by every worker with a [`WorkerCtx`]. A job that
//! panics poisons the pool; threads blocked in barriers are released and all
//! later submissions fail.

use std::any::Any;
use std::panic::{self, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::JoinHandle;

use thiserror::Error;

use crate::numa;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PoolError {
    #[error("invalid group configuration {groups:?} for {total} threads")]
    InvalidConfig { groups: Vec<usize>, total: usize },
    #[error("expected {expected} group tasks, got {got}")]
    TaskCount { expected: usize, got: usize },
    #[error("thread pool poisoned: {0}")]
    Poisoned(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BarrierKind {
    /// All threads of the caller's group.
    Local,
    /// Every thread of the pool.
    Global,
}

/// Unwind payload used to release threads from barriers of a poisoned pool.
struct PoisonSignal;

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

/// Reusable generation-counted barrier: short spin, then condvar sleep.
struct GenBarrier {
    participants: usize,
    arrived: AtomicUsize,
    generation: AtomicUsize,
    lock: Mutex<()>,
    cv: Condvar,
}

impl GenBarrier {
    fn new(participants: usize) -> Self {
        Self {
            participants,
            arrived: AtomicUsize::new(0),
            generation: AtomicUsize::new(0),
            lock: Mutex::new(()),
            cv: Condvar::new(),
        }
    }

    fn wait(&self, spin: u32, poisoned: &AtomicBool) -> Result<(), PoisonSignal> {
        if self.participants == 1 {
            return Ok(());
        }
        let gen = self.generation.load(Ordering::Acquire);
        if self.arrived.fetch_add(1, Ordering::AcqRel) + 1 == self.participants {
            self.arrived.store(0, Ordering::Relaxed);
            let _g = lock(&self.lock);
            self.generation.store(gen.wrapping_add(1), Ordering::Release);
            self.cv.notify_all();
            return Ok(());
        }
        for _ in 0..spin {
            if self.generation.load(Ordering::Acquire) != gen {
                return Ok(());
            }
            std::hint::spin_loop();
        }
        let mut g = lock(&self.lock);
        loop {
            if self.generation.load(Ordering::Acquire) != gen {
                return Ok(());
            }
            if poisoned.load(Ordering::Acquire) {
                return Err(PoisonSignal);
            }
            g = self.cv.wait(g).unwrap_or_else(|e| e.into_inner());
        }
    }

    fn wake_all(&self) {
        let _g = lock(&self.lock);
        self.cv.notify_all();
    }
}

/// One logical organization of the pool.
pub struct GroupLayout {
    sizes: Vec<usize>,
    starts: Vec<usize>,
    barriers: Vec<GenBarrier>,
}

impl GroupLayout {
    fn new(sizes: &[usize], total: usize) -> Result<Self, PoolError> {
        if sizes.is_empty() || sizes.contains(&0) || sizes.iter().sum::<usize>() != total {
            return Err(PoolError::InvalidConfig {
                groups: sizes.to_vec(),
                total,
            });
        }
        let starts = sizes
            .iter()
            .scan(0, |acc, &s| {
                let start = *acc;
                *acc += s;
                Some(start)
            })
            .collect();
        Ok(Self {
            sizes: sizes.to_vec(),
            starts,
            barriers: sizes.iter().map(|&s| GenBarrier::new(s)).collect(),
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    /// (group, rank within group) of a thread.
    pub fn locate(&self, thread: usize) -> (usize, usize) {
        let g = self.starts.partition_point(|&s| s <= thread) - 1;
        (g, thread - self.starts[g])
    }
}

/// Splits `total` threads into `n` contiguous groups of near-equal size.
pub fn even_split(total: usize, n: usize) -> Vec<usize> {
    let n = n.clamp(1, total.max(1));
    (0..n).map(|g| total / n + usize::from(g < total % n)).collect()
}

#[derive(Clone, Copy)]
struct JobRef(*const (dyn Fn(&mut WorkerCtx<'_>) + Sync));

// SAFETY: the pointee is Sync and outlives the job (see `ThreadPool::run`).
unsafe impl Send for JobRef {}

struct Dispatch {
    epoch: u64,
    job: Option<JobRef>,
    shutdown: bool,
}

struct Shared {
    total: usize,
    spin: u32,
    layout: Mutex<Arc<GroupLayout>>,
    global: GenBarrier,
    poisoned: AtomicBool,
    panic_msg: Mutex<Option<String>>,
    dispatch: Mutex<Dispatch>,
    dispatch_cv: Condvar,
    remaining: Mutex<usize>,
    done_cv: Condvar,
    pinned: Mutex<Vec<Option<usize>>>,
}

impl Shared {
    fn current_layout(&self) -> Arc<GroupLayout> {
        Arc::clone(&lock(&self.layout))
    }

    fn poison(&self, msg: String) {
        lock(&self.panic_msg).get_or_insert(msg);
        self.poisoned.store(true, Ordering::Release);
        self.global.wake_all();
        for b in &self.current_layout().barriers {
            b.wake_all();
        }
    }
}

/// Per-worker view handed to jobs.
pub struct WorkerCtx<'a> {
    shared: &'a Shared,
    index: usize,
    layout: Arc<GroupLayout>,
    group: usize,
    rank: usize,
}

impl WorkerCtx<'_> {
    pub fn thread_index(&self) -> usize {
        self.index
    }

    pub fn total_threads(&self) -> usize {
        self.shared.total
    }

    pub fn group(&self) -> usize {
        self.group
    }

    /// Rank within the caller's group.
    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn group_size(&self) -> usize {
        self.layout.sizes[self.group]
    }

    pub fn group_count(&self) -> usize {
        self.layout.sizes.len()
    }

    pub fn group_sizes(&self) -> &[usize] {
        &self.layout.sizes
    }

    pub fn barrier(&self, kind: BarrierKind) {
        let b = match kind {
            BarrierKind::Local => &self.layout.barriers[self.group],
            BarrierKind::Global => &self.shared.global,
        };
        if b.wait(self.shared.spin, &self.shared.poisoned).is_err() {
            panic::resume_unwind(Box::new(PoisonSignal));
        }
    }

    /// Collective reorganization of the pool from inside a job.
    ///
    /// Every thread must call this with the same sizes, immediately after a
    /// global barrier. Thread 0 installs the layout, a global barrier
    /// publishes it, and each thread refreshes its group and rank.
    pub fn reconfigure(&mut self, sizes: &[usize]) -> Result<(), PoolError> {
        let next = GroupLayout::new(sizes, self.shared.total)?;
        if self.index == 0 {
            *lock(&self.shared.layout) = Arc::new(next);
        }
        self.barrier(BarrierKind::Global);
        self.refresh();
        Ok(())
    }

    fn refresh(&mut self) {
        self.layout = self.shared.current_layout();
        (self.group, self.rank) = self.layout.locate(self.index);
    }
}

pub struct ThreadPool {
    shared: Arc<Shared>,
    workers: Vec<JoinHandle<()>>,
    submit: Mutex<()>,
}

impl std::fmt::Debug for ThreadPool {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ThreadPool")
            .field("threads", &self.shared.total)
            .field("groups", &self.groups())
            .finish()
    }
}

impl ThreadPool {
    /// Spawns `n` parked workers in a single group.
    pub fn spawn(n: usize) -> Self {
        Self::spawn_with_affinity(n, None)
    }

    /// Spawns `n` workers; worker `i` is pinned to `affinity[i]` when given.
    /// Pinning failures are logged and leave the worker unpinned.
    pub fn spawn_with_affinity(n: usize, affinity: Option<Vec<usize>>) -> Self {
        assert!(n >= 1, "a pool needs at least one thread");
        if let Some(a) = &affinity {
            assert_eq!(a.len(), n, "affinity map must cover every thread");
        }
        let cores = std::thread::available_parallelism().map_or(1, |c| c.get());
        let shared = Arc::new(Shared {
            total: n,
            spin: if n <= cores { 4096 } else { 0 },
            layout: Mutex::new(Arc::new(GroupLayout::new(&[n], n).expect("single group"))),
            global: GenBarrier::new(n),
            poisoned: AtomicBool::new(false),
            panic_msg: Mutex::new(None),
            dispatch: Mutex::new(Dispatch {
                epoch: 0,
                job: None,
                shutdown: false,
            }),
            dispatch_cv: Condvar::new(),
            remaining: Mutex::new(n),
            done_cv: Condvar::new(),
            pinned: Mutex::new(vec![None; n]),
        });

        let workers = (0..n)
            .map(|index| {
                let shared = Arc::clone(&shared);
                let core = affinity.as_ref().map(|a| a[index]);
                std::thread::Builder::new()
                    .name(format!("arclite-worker-{index}"))
                    .spawn(move || worker_main(shared, index, core))
                    .expect("spawning worker thread")
            })
            .collect();

        // wait until every worker has started (and attempted pinning)
        let mut remaining = lock(&shared.remaining);
        while *remaining > 0 {
            remaining = shared.done_cv.wait(remaining).unwrap_or_else(|e| e.into_inner());
        }
        drop(remaining);

        Self {
            shared,
            workers,
            submit: Mutex::new(()),
        }
    }

    pub fn total_threads(&self) -> usize {
        self.shared.total
    }

    pub fn groups(&self) -> Vec<usize> {
        self.shared.current_layout().sizes.clone()
    }

    /// Core each worker is pinned to, if pinning succeeded.
    pub fn pinned_cores(&self) -> Vec<Option<usize>> {
        lock(&self.shared.pinned).clone()
    }

    pub fn is_poisoned(&self) -> bool {
        self.shared.poisoned.load(Ordering::Acquire)
    }

    /// Reorganizes the pool between jobs.
    pub fn reconfigure(&self, sizes: &[usize]) -> Result<(), PoolError> {
        let _submit = lock(&self.submit);
        self.check_poison()?;
        let next = GroupLayout::new(sizes, self.shared.total)?;
        *lock(&self.shared.layout) = Arc::new(next);
        Ok(())
    }

    fn check_poison(&self) -> Result<(), PoolError> {
        if self.is_poisoned() {
            let msg = lock(&self.shared.panic_msg).clone().unwrap_or_default();
            return Err(PoolError::Poisoned(msg));
        }
        Ok(())
    }

    /// Runs `job` on every worker and blocks until all return.
    ///
    /// Not reentrant: calling `run` from inside a job deadlocks.
    pub fn run<F>(&self, job: F) -> Result<(), PoolError>
    where
        F: Fn(&mut WorkerCtx<'_>) + Sync,
    {
        let _submit = lock(&self.submit);
        self.check_poison()?;

        let job_ref: &(dyn Fn(&mut WorkerCtx<'_>) + Sync) = &job;
        // SAFETY: erases the borrow's lifetime. Every worker finishes with
        // the job (panics are caught) before `remaining` reaches zero, and we
        // block on that below, so the pointer never outlives `job`.
        let job_ref = JobRef(unsafe {
            std::mem::transmute::<
                *const (dyn Fn(&mut WorkerCtx<'_>) + Sync + '_),
                *const (dyn Fn(&mut WorkerCtx<'_>) + Sync + 'static),
            >(job_ref)
        });

        *lock(&self.shared.remaining) = self.shared.total;
        {
            let mut d = lock(&self.shared.dispatch);
            d.epoch += 1;
            d.job = Some(job_ref);
        }
        self.shared.dispatch_cv.notify_all();

        let mut remaining = lock(&self.shared.remaining);
        while *remaining > 0 {
            remaining = self.shared.done_cv.wait(remaining).unwrap_or_else(|e| e.into_inner());
        }
        drop(remaining);
        lock(&self.shared.dispatch).job = None;

        self.check_poison()
    }

    /// Runs `tasks[g]` on the threads of group `g`, all groups concurrently.
    pub fn run_on_groups(&self, tasks: &[&(dyn Fn(&mut WorkerCtx<'_>) + Sync)]) -> Result<(), PoolError> {
        let expected = self.groups().len();
        if tasks.len() != expected {
            return Err(PoolError::TaskCount {
                expected,
                got: tasks.len(),
            });
        }
        self.run(|ctx| tasks[ctx.group()](ctx))
    }
}

impl Drop for ThreadPool {
    fn drop(&mut self) {
        lock(&self.shared.dispatch).shutdown = true;
        self.shared.dispatch_cv.notify_all();
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

fn panic_message(payload: &(dyn Any + Send)) -> String {
    if let Some(s) = payload.downcast_ref::<&str>() {
        (*s).to_string()
    } else if let Some(s) = payload.downcast_ref::<String>() {
        s.clone()
    } else {
        "worker panicked".to_string()
    }
}

fn finish(shared: &Shared) {
    let mut remaining = lock(&shared.remaining);
    *remaining -= 1;
    if *remaining == 0 {
        shared.done_cv.notify_all();
    }
}

fn worker_main(shared: Arc<Shared>, index: usize, core: Option<usize>) {
    if let Some(core) = core {
        match numa::pin_current_thread(core) {
            Ok(()) => lock(&shared.pinned)[index] = Some(core),
            Err(e) => log::warn!("worker {index}: pinning to core {core} failed ({e}); running unpinned"),
        }
    }
    finish(&shared);

    let mut seen = 0u64;
    loop {
        let job = {
            let mut d = lock(&shared.dispatch);
            while d.epoch == seen && !d.shutdown {
                d = shared.dispatch_cv.wait(d).unwrap_or_else(|e| e.into_inner());
            }
            if d.shutdown {
                return;
            }
            seen = d.epoch;
            d.job.expect("job published with epoch")
        };

        let layout = shared.current_layout();
        let (group, rank) = layout.locate(index);
        let mut ctx = WorkerCtx {
            shared: &shared,
            index,
            layout,
            group,
            rank,
        };
        // SAFETY: the submitter keeps the closure alive until `finish` below.
        let f = unsafe { &*job.0 };
        if let Err(payload) = panic::catch_unwind(AssertUnwindSafe(|| f(&mut ctx))) {
            if !payload.is::<PoisonSignal>() {
                shared.poison(format!("worker {index}: {}", panic_message(payload.as_ref())));
            }
        }
        drop(ctx);
        finish(&shared);
    }
}
