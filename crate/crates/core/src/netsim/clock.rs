//! Clocks for activities.
//!
//! Every activity (recorders, mutator, client sessions) is written as plain
//! blocking code against [`Clock`]. Under [`run_tasks`] in virtual mode each
//! activity gets its own thread, but a baton-passing scheduler lets exactly
//! one of them run at a time, always the one with the earliest pending wake-up
//! `(time, sequence)`. That makes the interleaving, and therefore every byte
//! an experiment writes, a pure function of the seed. In wall mode the same
//! code runs on free threads with real sleeps.
//!
//! Tasks are either foreground or daemon. Once every foreground task has
//! finished, sleeping daemons are woken with [`Error::Shutdown`].

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;
use std::panic;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering as AtomicOrdering};
use std::sync::{Condvar, Mutex, MutexGuard};
use std::thread;
use std::time::{Duration, Instant};

use chrono::{DateTime, TimeDelta, Utc};

use crate::error::{Error, Result};
use crate::topology::ClockMode;

/// Origin of virtual time: 2024-06-01T00:00:00Z.
pub const VIRTUAL_EPOCH_UNIX_MS: i64 = 1_717_200_000_000;

/// Formats an instant as ISO-8601 UTC with millisecond precision.
pub fn iso_timestamp(time: DateTime<Utc>) -> String {
    time.format("%Y-%m-%dT%H:%M:%S%.3fZ").to_string()
}

pub fn virtual_timestamp(now_ms: f64) -> String {
    let unix_ms = VIRTUAL_EPOCH_UNIX_MS + now_ms.floor() as i64;
    iso_timestamp(DateTime::from_timestamp_millis(unix_ms).expect("timestamp in range"))
}

/// Parses a timestamp written by [`iso_timestamp`] (or any RFC 3339 string)
/// into unix milliseconds.
pub fn parse_timestamp_ms(text: &str) -> Option<i64> {
    DateTime::parse_from_rfc3339(text)
        .ok()
        .map(|t| t.with_timezone(&Utc).timestamp_millis())
}

pub trait Clock: Send + Sync {
    /// Milliseconds since the start of the run.
    fn now_ms(&self) -> f64;

    /// Blocks until `t_ms`. Returns [`Error::Shutdown`] when a daemon is being
    /// stopped instead.
    fn sleep_until(&self, t_ms: f64) -> Result<()>;

    fn sleep_ms(&self, duration_ms: f64) -> Result<()> {
        self.sleep_until(self.now_ms() + duration_ms.max(0.0))
    }

    /// Turns the calling foreground task into a daemon.
    fn detach(&self) {}

    /// True once a detached activity has been told to stop.
    fn is_shut_down(&self) -> bool {
        false
    }

    fn mode(&self) -> ClockMode;

    fn timestamp(&self) -> String;
}

/// Stand-alone virtual clock for a single activity: sleeping just moves time.
#[derive(Debug, Default)]
pub struct ManualClock {
    now_ms: Mutex<f64>,
}

impl ManualClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn starting_at(now_ms: f64) -> Self {
        ManualClock {
            now_ms: Mutex::new(now_ms),
        }
    }

    pub fn advance(&self, ms: f64) {
        *self.now_ms.lock().unwrap() += ms.max(0.0);
    }
}

impl Clock for ManualClock {
    fn now_ms(&self) -> f64 {
        *self.now_ms.lock().unwrap()
    }

    fn sleep_until(&self, t_ms: f64) -> Result<()> {
        let mut now = self.now_ms.lock().unwrap();
        if t_ms > *now {
            *now = t_ms;
        }
        Ok(())
    }

    fn mode(&self) -> ClockMode {
        ClockMode::Virtual
    }

    fn timestamp(&self) -> String {
        virtual_timestamp(self.now_ms())
    }
}

/// Foreground/daemon bookkeeping shared by the wall clocks of one run.
#[derive(Debug, Default)]
struct WallLifecycle {
    foreground: AtomicUsize,
    shutdown: AtomicBool,
}

impl WallLifecycle {
    fn release_foreground(&self) {
        if self.foreground.fetch_sub(1, AtomicOrdering::SeqCst) == 1 {
            self.shutdown.store(true, AtomicOrdering::SeqCst);
        }
    }
}

/// Real time. Sleeps are chunked so daemons notice shutdown promptly.
#[derive(Debug)]
pub struct WallClock {
    start: Instant,
    start_utc: DateTime<Utc>,
    life: Option<std::sync::Arc<WallLifecycle>>,
    daemon: AtomicBool,
}

const WALL_SLEEP_CHUNK: Duration = Duration::from_millis(20);

impl WallClock {
    pub fn new() -> Self {
        WallClock {
            start: Instant::now(),
            start_utc: Utc::now(),
            life: None,
            daemon: AtomicBool::new(false),
        }
    }

    fn shutting_down(&self) -> bool {
        self.daemon.load(AtomicOrdering::SeqCst)
            && self
                .life
                .as_ref()
                .is_some_and(|l| l.shutdown.load(AtomicOrdering::SeqCst))
    }
}

impl Default for WallClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for WallClock {
    fn now_ms(&self) -> f64 {
        self.start.elapsed().as_secs_f64() * 1000.0
    }

    fn sleep_until(&self, t_ms: f64) -> Result<()> {
        loop {
            if self.shutting_down() {
                return Err(Error::Shutdown);
            }
            let remaining = t_ms - self.now_ms();
            if remaining <= 0.0 {
                return Ok(());
            }
            thread::sleep(Duration::from_secs_f64(remaining / 1000.0).min(WALL_SLEEP_CHUNK));
        }
    }

    fn detach(&self) {
        if !self.daemon.swap(true, AtomicOrdering::SeqCst) {
            if let Some(life) = &self.life {
                life.release_foreground();
            }
        }
    }

    fn is_shut_down(&self) -> bool {
        self.shutting_down()
    }

    fn mode(&self) -> ClockMode {
        ClockMode::Wall
    }

    fn timestamp(&self) -> String {
        let elapsed = TimeDelta::from_std(self.start.elapsed()).unwrap_or_default();
        iso_timestamp(self.start_utc + elapsed)
    }
}

#[derive(Debug, Clone, Copy)]
struct Wake {
    at_ms: f64,
    seq: u64,
    task: usize,
}

impl PartialEq for Wake {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Wake {}

impl PartialOrd for Wake {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Wake {
    fn cmp(&self, other: &Self) -> Ordering {
        self.at_ms
            .total_cmp(&other.at_ms)
            .then(self.seq.cmp(&other.seq))
    }
}

#[derive(Debug)]
struct SchedState {
    now_ms: f64,
    queue: BinaryHeap<Reverse<Wake>>,
    running: Option<usize>,
    daemon: Vec<bool>,
    foreground: usize,
    shutdown: bool,
    seq: u64,
}

#[derive(Debug)]
struct Scheduler {
    state: Mutex<SchedState>,
    turn: Condvar,
}

impl Scheduler {
    fn lock(&self) -> MutexGuard<'_, SchedState> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn enqueue(st: &mut SchedState, at_ms: f64, task: usize) {
        let seq = st.seq;
        st.seq += 1;
        st.queue.push(Reverse(Wake { at_ms, seq, task }));
    }

    /// Hands the baton to the earliest pending wake-up.
    fn dispatch(&self, st: &mut SchedState) {
        if st.foreground == 0 {
            st.shutdown = true;
        }
        st.running = match st.queue.pop() {
            Some(Reverse(wake)) => {
                if !st.shutdown && wake.at_ms > st.now_ms {
                    st.now_ms = wake.at_ms;
                }
                Some(wake.task)
            }
            None => None,
        };
        self.turn.notify_all();
    }

    fn wait_turn<'a>(
        &'a self,
        mut st: MutexGuard<'a, SchedState>,
        task: usize,
    ) -> MutexGuard<'a, SchedState> {
        while st.running != Some(task) {
            st = self.turn.wait(st).unwrap_or_else(|e| e.into_inner());
        }
        st
    }

    fn finish(&self, task: usize) {
        let mut st = self.lock();
        if !st.daemon[task] {
            st.daemon[task] = true;
            st.foreground -= 1;
        }
        st.running = None;
        self.dispatch(&mut st);
    }
}

struct TaskClock<'a> {
    sched: &'a Scheduler,
    task: usize,
}

impl Clock for TaskClock<'_> {
    fn now_ms(&self) -> f64 {
        self.sched.lock().now_ms
    }

    fn sleep_until(&self, t_ms: f64) -> Result<()> {
        let mut st = self.sched.lock();
        if st.shutdown {
            return Err(Error::Shutdown);
        }
        let at = if t_ms > st.now_ms { t_ms } else { st.now_ms };
        Scheduler::enqueue(&mut st, at, self.task);
        self.sched.dispatch(&mut st);
        let st = self.sched.wait_turn(st, self.task);
        if st.shutdown {
            Err(Error::Shutdown)
        } else {
            Ok(())
        }
    }

    fn detach(&self) {
        let mut st = self.sched.lock();
        if !st.daemon[self.task] {
            st.daemon[self.task] = true;
            st.foreground -= 1;
        }
    }

    fn is_shut_down(&self) -> bool {
        self.sched.lock().shutdown
    }

    fn mode(&self) -> ClockMode {
        ClockMode::Virtual
    }

    fn timestamp(&self) -> String {
        virtual_timestamp(self.now_ms())
    }
}

struct FinishGuard<'a> {
    sched: &'a Scheduler,
    task: usize,
}

impl Drop for FinishGuard<'_> {
    fn drop(&mut self) {
        self.sched.finish(self.task);
    }
}

type TaskBody<'a> = Box<dyn FnOnce(&dyn Clock) -> Result<()> + Send + 'a>;

/// One activity of a run.
pub struct Task<'a> {
    pub name: String,
    pub daemon: bool,
    body: TaskBody<'a>,
}

impl<'a> Task<'a> {
    pub fn foreground(
        name: impl Into<String>,
        body: impl FnOnce(&dyn Clock) -> Result<()> + Send + 'a,
    ) -> Self {
        Task {
            name: name.into(),
            daemon: false,
            body: Box::new(body),
        }
    }

    pub fn daemon(
        name: impl Into<String>,
        body: impl FnOnce(&dyn Clock) -> Result<()> + Send + 'a,
    ) -> Self {
        Task {
            name: name.into(),
            daemon: true,
            body: Box::new(body),
        }
    }
}

/// Outcome of one task. A daemon stopped by shutdown reports `Ok`.
#[derive(Debug)]
pub struct TaskOutcome {
    pub name: String,
    pub result: Result<()>,
}

/// Runs the tasks to completion under the given clock mode. Results come
/// back in task order.
pub fn run_tasks(mode: ClockMode, tasks: Vec<Task<'_>>) -> Vec<TaskOutcome> {
    match mode {
        ClockMode::Virtual => run_virtual(tasks),
        ClockMode::Wall => run_wall(tasks),
    }
}

fn settle(name: String, joined: thread::Result<Result<()>>) -> TaskOutcome {
    match joined {
        Ok(Err(Error::Shutdown)) => TaskOutcome {
            name,
            result: Ok(()),
        },
        Ok(result) => TaskOutcome { name, result },
        Err(panic) => panic::resume_unwind(panic),
    }
}

fn run_virtual(tasks: Vec<Task<'_>>) -> Vec<TaskOutcome> {
    let sched = Scheduler {
        state: Mutex::new(SchedState {
            now_ms: 0.0,
            queue: BinaryHeap::new(),
            running: None,
            daemon: tasks.iter().map(|t| t.daemon).collect(),
            foreground: tasks.iter().filter(|t| !t.daemon).count(),
            shutdown: false,
            seq: 0,
        }),
        turn: Condvar::new(),
    };
    {
        let mut st = sched.lock();
        for task in 0..tasks.len() {
            Scheduler::enqueue(&mut st, 0.0, task);
        }
    }
    let sched = &sched;
    thread::scope(|scope| {
        let handles: Vec<_> = tasks
            .into_iter()
            .enumerate()
            .map(|(id, task)| {
                let name = task.name.clone();
                let handle = thread::Builder::new()
                    .name(task.name.clone())
                    .spawn_scoped(scope, move || {
                        let st = sched.lock();
                        let st = sched.wait_turn(st, id);
                        let stopped = st.shutdown;
                        drop(st);
                        let _guard = FinishGuard { sched, task: id };
                        if stopped {
                            return Err(Error::Shutdown);
                        }
                        (task.body)(&TaskClock { sched, task: id })
                    })
                    .expect("spawn task thread");
                (name, handle)
            })
            .collect();
        {
            let mut st = sched.lock();
            if st.running.is_none() {
                sched.dispatch(&mut st);
            }
        }
        handles
            .into_iter()
            .map(|(name, h)| settle(name, h.join()))
            .collect()
    })
}

fn run_wall(tasks: Vec<Task<'_>>) -> Vec<TaskOutcome> {
    let life = std::sync::Arc::new(WallLifecycle {
        foreground: AtomicUsize::new(tasks.iter().filter(|t| !t.daemon).count()),
        shutdown: AtomicBool::new(false),
    });
    if life.foreground.load(AtomicOrdering::SeqCst) == 0 {
        life.shutdown.store(true, AtomicOrdering::SeqCst);
    }
    let start = Instant::now();
    let start_utc = Utc::now();
    thread::scope(|scope| {
        let handles: Vec<_> = tasks
            .into_iter()
            .map(|task| {
                let name = task.name.clone();
                let clock = WallClock {
                    start,
                    start_utc,
                    life: Some(life.clone()),
                    daemon: AtomicBool::new(task.daemon),
                };
                let handle = thread::Builder::new()
                    .name(task.name.clone())
                    .spawn_scoped(scope, move || {
                        struct Release<'c>(&'c WallClock);
                        impl Drop for Release<'_> {
                            fn drop(&mut self) {
                                self.0.detach();
                            }
                        }
                        let _release = Release(&clock);
                        (task.body)(&clock)
                    })
                    .expect("spawn task thread");
                (name, handle)
            })
            .collect();
        handles
            .into_iter()
            .map(|(name, h)| settle(name, h.join()))
            .collect()
    })
}
