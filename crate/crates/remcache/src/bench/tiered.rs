//! Tiered key-value store on the simulated backend: the hybrid log's
//! spilled segments land on a remote-cache tier (through the real client
//! pipeline) and an event-timed emulated SSD; reads resolve from memory,
//! cache, or SSD by the suffix rule, with per-tier latency on the virtual
//! clock.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::client::MigrationOptimizations;
use crate::sim::world::SimWorld;
use crate::tieredkv::{
    CommitPoint, KvCore, ReadLocation, SsdBacking, TierChoice, TierCounters, TierLayout,
};
use crate::transport::netmodel::{us_to_ns, SimNanos};
use crate::types::{CacheDuration, Slo};
use crate::workload::{key_bytes, value_bytes, OpStream};

/// Emulated SSD timing: fixed per-IO service latency plus serialization at
/// a bandwidth cap.
#[derive(Debug, Clone, Copy)]
pub struct SsdTiming {
    pub latency_us: f64,
    pub bandwidth_gbps: f64,
}

impl Default for SsdTiming {
    fn default() -> Self {
        SsdTiming {
            latency_us: 100.0,
            bandwidth_gbps: 16.0,
        }
    }
}

pub struct TieredSimConfig {
    /// Tier-1 capacity in bytes; zero disables the cache tier entirely.
    pub cache_bytes: u64,
    pub segment_size: u64,
    pub memory_budget: u64,
    pub ssd: SsdTiming,
    /// File backing for the SSD tier (memory-backed when None).
    pub ssd_file: Option<PathBuf>,
    pub commit_point: CommitPoint,
    pub value_size: usize,
    /// In-memory read service cost.
    pub memory_read_us: f64,
}

impl Default for TieredSimConfig {
    fn default() -> Self {
        TieredSimConfig {
            cache_bytes: 0,
            segment_size: 16 << 20,
            memory_budget: 1 << 30,
            ssd: SsdTiming::default(),
            ssd_file: None,
            commit_point: CommitPoint::CacheTier,
            value_size: 8,
            memory_read_us: 0.3,
        }
    }
}

/// The tiered store attached to a simulated world.
pub struct TieredSimStore {
    pub core: KvCore,
    pub layout: TierLayout,
    ssd: SsdBacking,
    ssd_busy: SimNanos,
    ssd_timing: SsdTiming,
    memory_read_ns: SimNanos,
    /// Simulated cache index when the cache tier is enabled.
    pub cache: Option<usize>,
    pub counters: TierCounters,
    pub commit_point: CommitPoint,
    pub value_size: usize,
}

impl TieredSimStore {
    /// Builds the store, creating the cache tier through the world's
    /// control plane when `cache_bytes > 0`.
    pub fn new(world: &mut SimWorld, cfg: &TieredSimConfig) -> Result<Self, String> {
        let cache = if cfg.cache_bytes > 0 {
            let slo = Slo::new(cfg.value_size.max(8) as u64, 1e9, 1e9, 0.0, 0.0)
                .map_err(|e| e.to_string())?;
            let idx = world
                .create_cache(
                    cfg.cache_bytes,
                    slo,
                    CacheDuration::Infinite,
                    1,
                    MigrationOptimizations::default(),
                    None,
                )
                .map_err(|e| e.to_string())?;
            Some(idx)
        } else {
            None
        };
        let ssd = match &cfg.ssd_file {
            Some(path) => SsdBacking::file(path).map_err(|e| e.to_string())?,
            None => SsdBacking::Mem(Vec::new()),
        };
        Ok(TieredSimStore {
            core: KvCore::new(cfg.segment_size, cfg.memory_budget),
            layout: TierLayout {
                cache_capacity: cfg.cache_bytes,
                cache_cold: false,
            },
            ssd,
            ssd_busy: 0,
            ssd_timing: cfg.ssd,
            memory_read_ns: us_to_ns(cfg.memory_read_us),
            cache,
            counters: TierCounters::default(),
            commit_point: cfg.commit_point,
            value_size: cfg.value_size,
        })
    }

    pub fn device_len(&self) -> u64 {
        self.ssd.len()
    }

    fn ssd_io_done_at(&mut self, now: SimNanos, bytes: u64) -> SimNanos {
        let tx = us_to_ns(bytes as f64 * 8.0 / (self.ssd_timing.bandwidth_gbps * 1000.0));
        let start = now.max(self.ssd_busy);
        self.ssd_busy = start + tx;
        self.ssd_busy + us_to_ns(self.ssd_timing.latency_us)
    }

    /// Applies one upsert: appends to the in-memory tail and pushes spilled
    /// segments to both tiers. Returns once the commit point acknowledged
    /// (stepping the world for cache-tier acks).
    pub fn upsert_blocking(&mut self, world: &mut SimWorld, key: &[u8], value: &[u8]) {
        let (_, spills) = self.core.upsert(key, value);
        for seg in spills {
            let addr = self.ssd.len();
            debug_assert_eq!(addr, seg.base_addr);
            self.ssd.append(&seg.bytes);
            let ssd_done = self.ssd_io_done_at(world.now(), seg.bytes.len() as u64);
            if let Some(cache) = self.cache {
                let acks = Arc::new(AtomicU64::new(0));
                let mut expected = 0u64;
                for (dev_addr, cache_off, len) in
                    self.layout.plan_cache_write(seg.base_addr, seg.bytes.len() as u64)
                {
                    let src = (dev_addr - seg.base_addr) as usize;
                    let acks2 = Arc::clone(&acks);
                    expected += 1;
                    world
                        .cache_write(
                            cache,
                            0,
                            cache_off,
                            seg.bytes[src..src + len as usize].to_vec(),
                            Box::new(move |outcome| {
                                assert!(outcome.result.is_ok(), "cache tier write failed");
                                acks2.fetch_add(1, Ordering::Relaxed);
                            }),
                        )
                        .expect("cache tier write issued");
                }
                // the cache tier is at or below every commit point
                while acks.load(Ordering::Relaxed) < expected {
                    assert!(world.step(), "cache tier ack pending");
                }
            }
            if self.commit_point == CommitPoint::SsdTier {
                world.run_until(ssd_done);
            }
        }
    }
}

struct InflightRead {
    thread: usize,
    issued_at: SimNanos,
    remaining: usize,
    buf: Vec<u8>,
    key: Vec<u8>,
    key_index: u64,
    addr: u64,
    /// Value already resolved (memory hit or not-found).
    direct: Option<Option<Vec<u8>>>,
}

/// Closed-loop read benchmark over the tiered store: `threads` logical
/// threads each keep `window` reads outstanding; values are verified
/// against the deterministic load contents.
pub struct TieredReadBench {
    pub store: TieredSimStore,
    streams: Vec<OpStream>,
    window: usize,
    record_count: u64,
    inflight: BTreeMap<u64, InflightRead>,
    next_read: u64,
    outstanding: Vec<u64>,
    /// (read id, dst offset, bytes) delivered by tier completions.
    feed: Arc<Mutex<Vec<(u64, usize, Vec<u8>)>>>,
    pub completed: u64,
    pub verify_failures: u64,
    latencies: Vec<f64>,
}

impl TieredReadBench {
    pub fn new(
        store: TieredSimStore,
        streams: Vec<OpStream>,
        window: usize,
        record_count: u64,
    ) -> Self {
        let threads = streams.len();
        TieredReadBench {
            store,
            streams,
            window,
            record_count,
            inflight: BTreeMap::new(),
            next_read: 1,
            outstanding: vec![0; threads],
            feed: Arc::new(Mutex::new(Vec::new())),
            completed: 0,
            verify_failures: 0,
            latencies: Vec::new(),
        }
    }

    fn issue_read(&mut self, world: &mut SimWorld, thread: usize) {
        let key_index = self.streams[thread].next_key() % self.record_count;
        let key = key_bytes(key_index, 8);
        let id = self.next_read;
        self.next_read += 1;
        self.outstanding[thread] += 1;
        let issued_at = world.now();
        match self.store.core.locate(&key) {
            ReadLocation::NotFound => {
                self.inflight.insert(
                    id,
                    InflightRead {
                        thread,
                        issued_at,
                        remaining: 0,
                        buf: Vec::new(),
                        key,
                        key_index,
                        addr: 0,
                        direct: Some(None),
                    },
                );
                let feed = Arc::clone(&self.feed);
                world.schedule_in(
                    1,
                    Box::new(move |_| feed.lock().unwrap().push((id, 0, Vec::new()))),
                );
            }
            ReadLocation::Memory(v) => {
                self.store.counters.memory_reads += 1;
                self.inflight.insert(
                    id,
                    InflightRead {
                        thread,
                        issued_at,
                        remaining: 0,
                        buf: Vec::new(),
                        key,
                        key_index,
                        addr: 0,
                        direct: Some(Some(v)),
                    },
                );
                let feed = Arc::clone(&self.feed);
                world.schedule_in(
                    self.store.memory_read_ns,
                    Box::new(move |_| feed.lock().unwrap().push((id, 0, Vec::new()))),
                );
            }
            ReadLocation::Device { addr, len } => {
                let parts = self
                    .store
                    .layout
                    .plan_read(self.store.ssd.len(), addr, len as u64)
                    .expect("indexed device range");
                self.inflight.insert(
                    id,
                    InflightRead {
                        thread,
                        issued_at,
                        remaining: parts.len(),
                        buf: vec![0u8; len as usize],
                        key,
                        key_index,
                        addr,
                        direct: None,
                    },
                );
                for part in parts {
                    let dst0 = (part.device_addr - addr) as usize;
                    match part.tier {
                        TierChoice::Ssd => {
                            self.store.counters.ssd_reads += 1;
                            let bytes = self.store.ssd.read(part.device_addr, part.len);
                            let done = self.store.ssd_io_done_at(world.now(), part.len);
                            let feed = Arc::clone(&self.feed);
                            world.schedule_at(
                                done,
                                Box::new(move |_| feed.lock().unwrap().push((id, dst0, bytes))),
                            );
                        }
                        TierChoice::Cache => {
                            self.store.counters.cache_reads += 1;
                            let cache = self.store.cache.expect("cache tier enabled");
                            let feed = Arc::clone(&self.feed);
                            world
                                .cache_read(
                                    cache,
                                    0,
                                    part.cache_offset,
                                    part.len,
                                    Box::new(move |outcome| {
                                        let bytes = outcome.result.expect("cache tier read");
                                        feed.lock().unwrap().push((id, dst0, bytes));
                                    }),
                                )
                                .expect("cache tier read issued");
                        }
                    }
                }
            }
        }
    }

    /// Drains tier completions; returns the threads whose read finished.
    fn drain_feed(&mut self, now: SimNanos) -> Vec<usize> {
        let chunks: Vec<(u64, usize, Vec<u8>)> = std::mem::take(&mut *self.feed.lock().unwrap());
        let mut finished = Vec::new();
        for (id, dst0, bytes) in chunks {
            let done = {
                let fl = self.inflight.get_mut(&id).expect("inflight read");
                if fl.direct.is_none() {
                    fl.buf[dst0..dst0 + bytes.len()].copy_from_slice(&bytes);
                    fl.remaining -= 1;
                }
                fl.direct.is_some() || fl.remaining == 0
            };
            if !done {
                continue;
            }
            let fl = self.inflight.remove(&id).unwrap();
            let value = match fl.direct {
                Some(v) => v,
                None => KvCore::decode_value(&fl.buf, &fl.key, fl.addr).ok(),
            };
            let expect = value_bytes(fl.key_index, 0, self.store.value_size);
            if value.as_deref() != Some(&expect[..]) {
                self.verify_failures += 1;
            }
            self.completed += 1;
            self.latencies.push((now - fl.issued_at) as f64 / 1000.0);
            self.outstanding[fl.thread] -= 1;
            finished.push(fl.thread);
        }
        finished
    }

    /// Runs the closed loop until `until_ns`; returns per-interval rows of
    /// (t_s, mops, p50_us, p99_us, ops_done).
    pub fn run(
        &mut self,
        world: &mut SimWorld,
        until_ns: SimNanos,
        interval_ns: SimNanos,
    ) -> Vec<(f64, f64, f64, f64, u64)> {
        let mut rows = Vec::new();
        for t in 0..self.streams.len() {
            while self.outstanding[t] < self.window as u64 {
                self.issue_read(world, t);
            }
        }
        let mut interval_end = world.now() + interval_ns;
        let mut interval_ops = 0u64;
        while world.now() < until_ns {
            if !world.step() {
                break;
            }
            while world.now() >= interval_end {
                let mut lats = std::mem::take(&mut self.latencies);
                lats.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let pct = |p: f64| {
                    if lats.is_empty() {
                        0.0
                    } else {
                        lats[((lats.len() - 1) as f64 * p).round() as usize]
                    }
                };
                rows.push((
                    interval_end as f64 / 1e9,
                    interval_ops as f64 * 1000.0 / interval_ns as f64,
                    pct(0.5),
                    pct(0.99),
                    interval_ops,
                ));
                interval_ops = 0;
                interval_end += interval_ns;
            }
            let now = world.now();
            let finished = self.drain_feed(now);
            interval_ops += finished.len() as u64;
            for t in finished {
                if world.now() < until_ns {
                    self.issue_read(world, t);
                }
            }
        }
        rows
    }
}
