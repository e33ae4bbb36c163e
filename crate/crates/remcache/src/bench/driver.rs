//! Closed-loop load driver for simulated caches: each application thread
//! keeps a window of operations outstanding, issues a replacement whenever
//! one retires, and samples per-operation latency off the virtual clock
//! (FIFO retirement makes the oldest outstanding issue time the one that
//! completed).

use std::collections::VecDeque;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::client::ClientError;
use crate::sim::world::SimWorld;
use crate::transport::netmodel::SimNanos;

/// One generated cache operation.
pub enum CacheOp {
    Read { addr: u64, len: u64 },
    Write { addr: u64, payload: Vec<u8> },
}

/// Produces the next operation for a thread.
pub trait OpSource {
    fn next_op(&mut self, seq: u64) -> CacheOp;
}

impl<F: FnMut(u64) -> CacheOp> OpSource for F {
    fn next_op(&mut self, seq: u64) -> CacheOp {
        self(seq)
    }
}

/// Per-interval throughput and latency digest.
#[derive(Debug, Clone)]
pub struct IntervalStats {
    pub start_ns: SimNanos,
    pub end_ns: SimNanos,
    pub reads_done: u64,
    pub writes_done: u64,
    pub read_latencies_us: Vec<f64>,
    pub write_latencies_us: Vec<f64>,
}

impl IntervalStats {
    fn new(start_ns: SimNanos, end_ns: SimNanos) -> Self {
        IntervalStats {
            start_ns,
            end_ns,
            reads_done: 0,
            writes_done: 0,
            read_latencies_us: Vec::new(),
            write_latencies_us: Vec::new(),
        }
    }

    pub fn ops_done(&self) -> u64 {
        self.reads_done + self.writes_done
    }

    pub fn mops(&self) -> f64 {
        let dur_ns = (self.end_ns - self.start_ns).max(1) as f64;
        self.ops_done() as f64 * 1000.0 / dur_ns
    }

    pub fn read_mops(&self) -> f64 {
        let dur_ns = (self.end_ns - self.start_ns).max(1) as f64;
        self.reads_done as f64 * 1000.0 / dur_ns
    }

    pub fn write_mops(&self) -> f64 {
        let dur_ns = (self.end_ns - self.start_ns).max(1) as f64;
        self.writes_done as f64 * 1000.0 / dur_ns
    }

    pub fn percentile_us(&self, p: f64) -> f64 {
        let mut all: Vec<f64> = self
            .read_latencies_us
            .iter()
            .chain(self.write_latencies_us.iter())
            .copied()
            .collect();
        if all.is_empty() {
            return 0.0;
        }
        all.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let idx = ((all.len() - 1) as f64 * p).round() as usize;
        all[idx]
    }
}

struct ThreadState {
    source: Box<dyn OpSource>,
    /// Issue times of outstanding ops, oldest first; per-thread FIFO
    /// retirement pairs completions with the front.
    outstanding: VecDeque<(SimNanos, bool /* is read */)>,
    issued: u64,
    stalled: bool,
}

/// Closed-loop driver over one simulated cache.
pub struct CacheDriver {
    pub cache: usize,
    window: usize,
    threads: Vec<ThreadState>,
    pub errors: Arc<AtomicU64>,
    pub total_reads: u64,
    pub total_writes: u64,
}

impl CacheDriver {
    pub fn new(cache: usize, window: usize, sources: Vec<Box<dyn OpSource>>) -> Self {
        CacheDriver {
            cache,
            window,
            threads: sources
                .into_iter()
                .map(|source| ThreadState {
                    source,
                    outstanding: VecDeque::new(),
                    issued: 0,
                    stalled: false,
                })
                .collect(),
            errors: Arc::new(AtomicU64::new(0)),
            total_reads: 0,
            total_writes: 0,
        }
    }

    fn issue_one(&mut self, world: &mut SimWorld, thread: usize) -> bool {
        let ts = &mut self.threads[thread];
        let seq = ts.issued;
        let op = ts.source.next_op(seq);
        let errors = Arc::clone(&self.errors);
        let cb: crate::client::OpCallback = Box::new(move |outcome| {
            if outcome.result.is_err() {
                errors.fetch_add(1, Ordering::Relaxed);
            }
        });
        let now = world.now();
        let result = match op {
            CacheOp::Read { addr, len } => {
                world.cache_read(self.cache, thread, addr, len, cb).map(|_| true)
            }
            CacheOp::Write { addr, payload } => world
                .cache_write(self.cache, thread, addr, payload, cb)
                .map(|_| false),
        };
        match result {
            Ok(is_read) => {
                let ts = &mut self.threads[thread];
                ts.issued += 1;
                ts.outstanding.push_back((now, is_read));
                ts.stalled = false;
                true
            }
            Err(ClientError::Backpressured) => {
                self.threads[thread].stalled = true;
                false
            }
            Err(_) => {
                self.errors.fetch_add(1, Ordering::Relaxed);
                false
            }
        }
    }

    fn fill_windows(&mut self, world: &mut SimWorld) {
        for t in 0..self.threads.len() {
            while self.threads[t].outstanding.len() < self.window && !self.threads[t].stalled {
                if !self.issue_one(world, t) {
                    break;
                }
            }
        }
    }

    /// Runs the closed loop until the virtual clock reaches `until_ns`,
    /// flushing one `IntervalStats` per `interval_ns` of virtual time.
    pub fn run(
        &mut self,
        world: &mut SimWorld,
        until_ns: SimNanos,
        interval_ns: SimNanos,
        mut on_interval: impl FnMut(IntervalStats),
    ) {
        let mut interval = IntervalStats::new(world.now(), world.now() + interval_ns);
        self.fill_windows(world);
        loop {
            if world.now() >= until_ns {
                break;
            }
            if !world.step() {
                break;
            }
            // flush any interval boundaries we crossed
            while world.now() >= interval.end_ns {
                let next =
                    IntervalStats::new(interval.end_ns, (interval.end_ns + interval_ns).min(until_ns).max(interval.end_ns + 1));
                on_interval(std::mem::replace(&mut interval, next));
            }
            let notes = world.take_completion_notes();
            for note in notes {
                if note.cache != self.cache {
                    continue;
                }
                let ts = &mut self.threads[note.app_thread];
                if let Some((issued_at, is_read)) = ts.outstanding.pop_front() {
                    let lat_us = (world.now().saturating_sub(issued_at)) as f64 / 1000.0;
                    if is_read {
                        interval.reads_done += 1;
                        self.total_reads += 1;
                        interval.read_latencies_us.push(lat_us);
                    } else {
                        interval.writes_done += 1;
                        self.total_writes += 1;
                        interval.write_latencies_us.push(lat_us);
                    }
                }
            }
            self.fill_windows(world);
        }
        interval.end_ns = world.now().max(interval.start_ns + 1);
        on_interval(interval);
    }

    /// Operations issued so far, per thread.
    pub fn issued_counts(&self) -> Vec<u64> {
        self.threads.iter().map(|t| t.issued).collect()
    }

    /// Issues everything outstanding to completion (no new operations).
    pub fn drain(&mut self, world: &mut SimWorld) {
        while self.threads.iter().any(|t| !t.outstanding.is_empty()) {
            if !world.step() {
                break;
            }
            for note in world.take_completion_notes() {
                if note.cache == self.cache {
                    self.threads[note.app_thread].outstanding.pop_front();
                }
            }
        }
    }
}
