//! Driving threads: a seeded round-robin scheduler for reproducible
//! interleavings, and OS-thread executors for free-running processes.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ClockMode, TargetProcess, ThreadId, ThreadStatus};

/// Round-robin over runnable threads with a random quantum per turn.
pub struct Scheduler {
    rng: ChaCha8Rng,
    cursor: usize,
    max_quantum: u32,
}

impl Scheduler {
    pub fn new(seed: u64) -> Scheduler {
        Scheduler { rng: ChaCha8Rng::seed_from_u64(seed), cursor: 0, max_quantum: 8 }
    }

    pub fn with_max_quantum(mut self, q: u32) -> Scheduler {
        self.max_quantum = q.max(1);
        self
    }

    /// Run at most `budget` steps. When every live thread sleeps, a step
    /// clock skips ahead (counted against the budget). Returns the budget
    /// used; less than `budget` means every thread is terminal.
    pub fn run(&mut self, p: &TargetProcess, budget: u64) -> u64 {
        let mut used = 0;
        while used < budget {
            let n = p.thread_count();
            let now = p.now_us();
            let mut pick = None;
            let mut wake: Option<u64> = None;
            for k in 0..n {
                let tid = ((self.cursor + k) % n) as ThreadId;
                match p.thread_status(tid).expect("thread exists") {
                    ThreadStatus::Running => {
                        pick = Some(tid);
                        break;
                    }
                    ThreadStatus::Sleeping { until } if until <= now => {
                        pick = Some(tid);
                        break;
                    }
                    ThreadStatus::Sleeping { until } => wake = Some(wake.map_or(until, |w| w.min(until))),
                    _ => {}
                }
            }
            let Some(tid) = pick else {
                match wake {
                    Some(w) if p.clock_mode() == ClockMode::Steps => {
                        let skip = (w - now).min(budget - used);
                        p.advance_clock(skip);
                        used += skip;
                        continue;
                    }
                    Some(_) => {
                        std::thread::sleep(Duration::from_micros(50));
                        continue;
                    }
                    None => break,
                }
            };
            let quantum = self.rng.random_range(1..=self.max_quantum);
            for _ in 0..quantum {
                if used >= budget {
                    break;
                }
                used += 1;
                if p.step(tid).expect("thread exists") != ThreadStatus::Running {
                    break;
                }
            }
            self.cursor = tid as usize + 1;
        }
        used
    }

    /// Run until every thread is terminal or `limit` steps pass. Returns
    /// whether all threads finished.
    pub fn run_to_completion(&mut self, p: &TargetProcess, limit: u64) -> bool {
        self.run(p, limit) < limit || (0..p.thread_count()).all(|t| p.thread_status(t as ThreadId).unwrap().is_terminal())
    }
}

/// Where the weaver yields while it waits, and how it tells time.
pub trait Checkpoint {
    fn yield_now(&mut self, p: &TargetProcess);
    fn now_us(&self, p: &TargetProcess) -> u64;
}

/// Runs a seeded burst of executor steps at every checkpoint, so weaving
/// interleaves with execution reproducibly on one OS thread.
pub struct DeterministicDriver {
    pub scheduler: Scheduler,
    rng: ChaCha8Rng,
    max_burst: u64,
    yields: u64,
}

impl DeterministicDriver {
    pub fn new(seed: u64) -> DeterministicDriver {
        DeterministicDriver {
            scheduler: Scheduler::new(seed),
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15),
            max_burst: 16,
            yields: 0,
        }
    }

    pub fn with_max_burst(mut self, b: u64) -> DeterministicDriver {
        self.max_burst = b;
        self
    }

    pub fn yields(&self) -> u64 {
        self.yields
    }
}

impl Checkpoint for DeterministicDriver {
    fn yield_now(&mut self, p: &TargetProcess) {
        self.yields += 1;
        let burst = self.rng.random_range(0..=self.max_burst);
        let ran = self.scheduler.run(p, burst);
        // Time passes even when nothing can run.
        if ran < burst.max(1) {
            p.advance_clock(burst.max(1) - ran);
        }
    }

    fn now_us(&self, p: &TargetProcess) -> u64 {
        p.now_us()
    }
}

/// For processes driven by [`Executors`]: yields the OS thread and measures
/// wall time.
pub struct WallClock {
    started: Instant,
}

impl WallClock {
    pub fn new() -> WallClock {
        WallClock { started: Instant::now() }
    }
}

impl Default for WallClock {
    fn default() -> Self {
        WallClock::new()
    }
}

impl Checkpoint for WallClock {
    fn yield_now(&mut self, _p: &TargetProcess) {
        std::thread::sleep(Duration::from_micros(20));
    }

    fn now_us(&self, _p: &TargetProcess) -> u64 {
        self.started.elapsed().as_micros() as u64
    }
}

/// For processes driven by [`Executors`]: yields the OS thread and tells
/// time by the process clock, so reported instants line up with traces.
#[derive(Debug, Default, Clone, Copy)]
pub struct ProcessClock;

impl Checkpoint for ProcessClock {
    fn yield_now(&mut self, _p: &TargetProcess) {
        std::thread::sleep(Duration::from_micros(20));
    }

    fn now_us(&self, p: &TargetProcess) -> u64 {
        p.now_us()
    }
}

/// One OS thread per VM thread, stepping until the VM thread finishes or
/// [`Executors::stop`] is called.
pub struct Executors {
    stop: Arc<AtomicBool>,
    steps: Arc<AtomicU64>,
    handles: Vec<JoinHandle<()>>,
}

impl Executors {
    pub fn start(p: Arc<TargetProcess>, tids: &[ThreadId]) -> Executors {
        let stop = Arc::new(AtomicBool::new(false));
        let steps = Arc::new(AtomicU64::new(0));
        let handles = tids
            .iter()
            .map(|&tid| {
                let (p, stop, steps) = (Arc::clone(&p), Arc::clone(&stop), Arc::clone(&steps));
                std::thread::spawn(move || {
                    let mut n = 0u64;
                    while !stop.load(Ordering::Relaxed) {
                        match p.step(tid) {
                            Ok(ThreadStatus::Running) => {
                                n += 1;
                                if n.is_multiple_of(256) {
                                    steps.fetch_add(256, Ordering::Relaxed);
                                    std::thread::yield_now();
                                }
                            }
                            Ok(ThreadStatus::Sleeping { until }) => {
                                if p.clock_mode() == ClockMode::Steps {
                                    p.advance_clock(1);
                                    std::thread::yield_now();
                                } else {
                                    let left = until.saturating_sub(p.now_us()).min(500);
                                    std::thread::sleep(Duration::from_micros(left.max(1)));
                                }
                            }
                            _ => break,
                        }
                    }
                })
            })
            .collect();
        Executors { stop, steps, handles }
    }

    /// Approximate number of steps executed so far.
    pub fn progress(&self) -> u64 {
        self.steps.load(Ordering::Relaxed)
    }

    /// Wait for every VM thread to finish by itself.
    pub fn wait(mut self) {
        for h in self.handles.drain(..) {
            let _ = h.join();
        }
    }

    pub fn stop(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        for h in self.handles.drain(..) {
            let _ = h.join();
        }
    }
}

impl Drop for Executors {
    fn drop(&mut self) {
        self.shutdown();
    }
}
