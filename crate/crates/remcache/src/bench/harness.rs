//! End-to-end experiment harnesses: the cache-direct benchmark, the tiered
//! key-value benchmark, and the region-migration demonstration. All run on
//! the simulated backend and emit deterministic CSV rows.

use std::sync::{Arc, Mutex};

use crate::bench::driver::{CacheDriver, CacheOp, IntervalStats, OpSource};
use crate::bench::tiered::{TieredReadBench, TieredSimConfig, TieredSimStore};
use crate::client::MigrationOptimizations;
use crate::clustersim::ClusterSim;
use crate::manager::{Manager, ModelSettings};
use crate::perfmodel::oracle::SyntheticOracle;
use crate::sim::world::SimWorld;
use crate::transport::netmodel::NetworkModel;
use crate::types::{CacheDuration, Slo, VmKind, VmSpec};
use crate::workload::{value_bytes, KeyDistribution, WorkloadSpec};

/// One CSV row of benchmark output.
#[derive(Debug, Clone)]
pub struct BenchRow {
    pub timestamp_s: f64,
    pub threads: usize,
    pub target: String,
    pub backend: String,
    pub ops_done: u64,
    pub mops: f64,
    pub p50_lat_us: f64,
    pub p99_lat_us: f64,
}

pub const BENCH_CSV_HEADER: &str =
    "timestamp_s,threads,target,backend,ops_done,mops,p50_lat_us,p99_lat_us";

pub fn rows_to_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from(BENCH_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{:.3},{},{},{},{},{:.6},{:.3},{:.3}\n",
            r.timestamp_s, r.threads, r.target, r.backend, r.ops_done, r.mops, r.p50_lat_us, r.p99_lat_us
        ));
    }
    out
}

/// A generously sized uniform cluster plus a synthetic-oracle manager,
/// ready for cache creation.
pub fn standard_world(region_size: u64, seed: u64, model: NetworkModel) -> SimWorld {
    let menu = vec![
        VmSpec {
            vm_type: "std32".into(),
            cores: 16,
            memory: 32 * region_size,
            price_per_hour: 1.0,
            distance_switches: 1,
            kind: VmKind::OnDemand,
        },
        VmSpec {
            vm_type: "spot32".into(),
            cores: 16,
            memory: 32 * region_size,
            price_per_hour: 0.4,
            distance_switches: 1,
            kind: VmKind::Spot,
        },
    ];
    let cluster = ClusterSim::uniform(8, 64, 512 * region_size, menu);
    let manager = Manager::new(
        region_size,
        ModelSettings::default(),
        Box::new(SyntheticOracle::default()),
    );
    let mut world = SimWorld::new(model, seed);
    world.install_control_plane(cluster, manager);
    world
}

// ---- cache-direct benchmark -------------------------------------------------

pub struct CacheBenchConfig {
    pub capacity: u64,
    pub region_size: u64,
    pub slo: Slo,
    pub threads: usize,
    /// Outstanding operations per application thread.
    pub window: usize,
    pub duration_s: f64,
    pub interval_s: f64,
    pub workload: WorkloadSpec,
    pub seed: u64,
    pub backend_label: String,
}

impl Default for CacheBenchConfig {
    fn default() -> Self {
        CacheBenchConfig {
            capacity: 1 << 30,
            region_size: 1 << 30,
            slo: Slo::new(8, 1e9, 1e9, 0.0, 0.0).unwrap(),
            threads: 4,
            window: 16,
            duration_s: 2.0,
            interval_s: 1.0,
            workload: WorkloadSpec {
                distribution: KeyDistribution::Uniform,
                record_count: 1_000_000,
                key_size: 8,
                value_size: 8,
                read_fraction: 1.0,
                threads: 4,
                seed: 1,
            },
            seed: 1,
            backend_label: "sim".into(),
        }
    }
}

/// Runs reads/writes straight against a cache; records map to addresses at
/// `value_size` stride.
pub fn run_cache_bench(cfg: &CacheBenchConfig) -> Result<Vec<BenchRow>, String> {
    cfg.workload.validate()?;
    let mut world = standard_world(cfg.region_size, cfg.seed, NetworkModel::default());
    let cache = world
        .create_cache(
            cfg.capacity,
            cfg.slo,
            CacheDuration::Infinite,
            cfg.threads,
            MigrationOptimizations::default(),
            None,
        )
        .map_err(|e| e.to_string())?;
    let stride = cfg.workload.value_size.max(1) as u64;
    let record_span = cfg.capacity / stride;
    let sources: Vec<Box<dyn OpSource>> = (0..cfg.threads)
        .map(|t| {
            let mut stream = cfg.workload.stream(t);
            let value_size = cfg.workload.value_size;
            let src: Box<dyn OpSource> = Box::new(move |_seq: u64| {
                let key = stream.next_key() % record_span;
                let addr = key * stride;
                match stream.next_op() {
                    crate::workload::KeyedOp::Read { .. } => CacheOp::Read {
                        addr,
                        len: value_size as u64,
                    },
                    crate::workload::KeyedOp::Upsert { .. } => CacheOp::Write {
                        addr,
                        payload: value_bytes(key, 0, value_size),
                    },
                }
            });
            src
        })
        .collect();
    let mut driver = CacheDriver::new(cache, cfg.window, sources);
    let start = world.now();
    let until = start + (cfg.duration_s * 1e9) as u64;
    let interval = (cfg.interval_s * 1e9) as u64;
    let rows = Arc::new(Mutex::new(Vec::new()));
    let rows2 = Arc::clone(&rows);
    let threads = cfg.threads;
    let backend = cfg.backend_label.clone();
    driver.run(&mut world, until, interval, move |stats: IntervalStats| {
        if stats.ops_done() == 0 && stats.end_ns <= stats.start_ns + 1 {
            return;
        }
        rows2.lock().unwrap().push(BenchRow {
            timestamp_s: stats.end_ns as f64 / 1e9,
            threads,
            target: "cache-direct".into(),
            backend: backend.clone(),
            ops_done: stats.ops_done(),
            mops: stats.mops(),
            p50_lat_us: stats.percentile_us(0.5),
            p99_lat_us: stats.percentile_us(0.99),
        });
    });
    let rows = Arc::try_unwrap(rows).expect("driver done").into_inner().unwrap();
    Ok(rows)
}

// ---- tiered KV benchmark ------------------------------------------------------

pub struct TieredBenchConfig {
    pub tiered: TieredSimConfig,
    pub region_size: u64,
    pub record_count: u64,
    pub threads: usize,
    pub window: usize,
    pub duration_s: f64,
    pub interval_s: f64,
    pub distribution: KeyDistribution,
    pub seed: u64,
}

pub struct TieredBenchOutcome {
    pub rows: Vec<BenchRow>,
    pub counters: crate::tieredkv::TierCounters,
    pub verify_failures: u64,
    pub total_ops: u64,
}

/// Loads `record_count` keys then runs the closed-loop read phase.
pub fn run_tiered_bench(cfg: &TieredBenchConfig) -> Result<TieredBenchOutcome, String> {
    let mut world = standard_world(cfg.region_size, cfg.seed, NetworkModel::default());
    let mut store = TieredSimStore::new(&mut world, &cfg.tiered)?;
    for key_index in 0..cfg.record_count {
        let key = crate::workload::key_bytes(key_index, 8);
        let value = value_bytes(key_index, 0, cfg.tiered.value_size);
        store.upsert_blocking(&mut world, &key, &value);
    }
    let spec = WorkloadSpec {
        distribution: cfg.distribution,
        record_count: cfg.record_count,
        key_size: 8,
        value_size: cfg.tiered.value_size,
        read_fraction: 1.0,
        threads: cfg.threads,
        seed: cfg.seed,
    };
    spec.validate()?;
    let streams = (0..cfg.threads).map(|t| spec.stream(t)).collect();
    let mut bench = TieredReadBench::new(store, streams, cfg.window, cfg.record_count);
    let until = world.now() + (cfg.duration_s * 1e9) as u64;
    let interval = (cfg.interval_s * 1e9) as u64;
    let t0 = world.now();
    let raw = bench.run(&mut world, until, interval);
    let rows = raw
        .into_iter()
        .map(|(t, mops, p50, p99, ops)| BenchRow {
            timestamp_s: t - t0 as f64 / 1e9,
            threads: cfg.threads,
            target: "tieredkv".into(),
            backend: "sim".into(),
            ops_done: ops,
            mops,
            p50_lat_us: p50,
            p99_lat_us: p99,
        })
        .collect();
    Ok(TieredBenchOutcome {
        rows,
        counters: bench.store.counters,
        verify_failures: bench.verify_failures,
        total_ops: bench.completed,
    })
}

// ---- migration demonstration ---------------------------------------------------

#[derive(Debug, Clone)]
pub struct MigrateDemoConfig {
    pub regions: u32,
    pub region_size: u64,
    /// (virtual second, regions to migrate) pairs.
    pub schedule: Vec<(f64, u32)>,
    pub horizon_s: f64,
    pub interval_s: f64,
    pub reader_threads: usize,
    pub writer_threads: usize,
    /// Outstanding ops per thread; large windows let the pipeline ride out
    /// per-region write pauses.
    pub window: usize,
    pub optimizations: MigrationOptimizations,
    pub seed: u64,
}

impl Default for MigrateDemoConfig {
    fn default() -> Self {
        MigrateDemoConfig {
            regions: 7,
            region_size: 32 << 20,
            schedule: vec![(1.0, 1), (2.0, 2), (3.0, 4)],
            horizon_s: 4.0,
            interval_s: 1.0 / 32.0,
            reader_threads: 1,
            writer_threads: 1,
            window: 8192,
            optimizations: MigrationOptimizations::default(),
            seed: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DemoRow {
    pub t_s: f64,
    pub read_mops: f64,
    pub write_mops: f64,
    pub read_ops: u64,
    pub write_ops: u64,
    pub duration_s: f64,
}

#[derive(Debug)]
pub struct MigrateDemoOutcome {
    pub rows: Vec<DemoRow>,
    /// Count of reads stalled because their region was migrating.
    pub reads_paused: u64,
    pub writes_paused: u64,
    /// All acknowledged writes verified against a final read-back.
    pub acked_writes: u64,
    pub lost_writes: u64,
    /// Relative write-throughput dip per scheduled migration, against the
    /// pre-migration baseline.
    pub write_dips: Vec<f64>,
    pub read_dips: Vec<f64>,
}

pub const DEMO_CSV_HEADER: &str = "t_s,read_mops,write_mops";

pub fn demo_rows_to_csv(rows: &[DemoRow]) -> String {
    let mut out = String::from(DEMO_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{:.3},{:.6},{:.6}\n",
            r.t_s, r.read_mops, r.write_mops
        ));
    }
    out
}

/// Runs the migration demonstration: a cache under reader and writer load
/// migrates batches of regions per the schedule; per-interval throughput
/// and a byte-exact ack audit come back.
pub fn run_migrate_demo(cfg: &MigrateDemoConfig) -> Result<MigrateDemoOutcome, String> {
    let mut world = standard_world(cfg.region_size, cfg.seed, NetworkModel::default());
    let capacity = cfg.regions as u64 * cfg.region_size;
    let threads = cfg.reader_threads + cfg.writer_threads;
    let cache = world
        .create_cache(
            capacity,
            Slo::new(8, 1e9, 1e9, 0.0, 0.0).unwrap(),
            CacheDuration::Infinite,
            threads,
            cfg.optimizations,
            None,
        )
        .map_err(|e| e.to_string())?;
    let target = world.add_migration_target(cache).map_err(|e| e.to_string())?;

    // readers use odd 64-byte blocks, writers even ones: address-disjoint,
    // so reads never depend on queued writes
    let blocks = capacity / 64;
    let mut sources: Vec<Box<dyn OpSource>> = Vec::new();
    for r in 0..cfg.reader_threads {
        let mut mix = 0x9e37_79b9u64
            .wrapping_mul(cfg.seed + 1)
            .wrapping_add(r as u64);
        let src: Box<dyn OpSource> = Box::new(move |_seq: u64| {
            mix ^= mix << 13;
            mix ^= mix >> 7;
            mix ^= mix << 17;
            let block = (mix % (blocks / 2)) * 2 + 1;
            CacheOp::Read {
                addr: block * 64,
                len: 8,
            }
        });
        sources.push(src);
    }
    for wtr in 0..cfg.writer_threads {
        let writers = cfg.writer_threads as u64;
        let wtr64 = wtr as u64;
        let src: Box<dyn OpSource> = Box::new(move |seq: u64| {
            // walk this writer's own slice of even blocks
            let slot = seq.wrapping_mul(writers).wrapping_add(wtr64) % (blocks / 2);
            let addr = slot * 2 * 64;
            let value = (wtr64 << 56) | seq;
            CacheOp::Write {
                addr,
                payload: value.to_le_bytes().to_vec(),
            }
        });
        sources.push(src);
    }
    let mut driver = CacheDriver::new(cache, cfg.window, sources);

    // the ack audit needs per-write callbacks; the driver's shared error
    // counter stays, and the byte map is reconstructed from issue order
    // after the drain (per-thread FIFO acks make issue order = ack order)
    let interval_ns = (cfg.interval_s * 1e9) as u64;
    let rows: Arc<Mutex<Vec<DemoRow>>> = Arc::new(Mutex::new(Vec::new()));
    let mut boundaries: Vec<(u64, u32)> = cfg
        .schedule
        .iter()
        .map(|&(t, k)| ((t * 1e9) as u64, k))
        .collect();
    boundaries.sort_by_key(|&(t, _)| t);
    let horizon = (cfg.horizon_s * 1e9) as u64;

    let mut next_entry = 0usize;
    let mut cursor = world.now();
    for (at, count) in boundaries {
        let rows2 = Arc::clone(&rows);
        driver.run(&mut world, cursor.max(at), interval_ns, move |s| {
            push_demo_row(&rows2, interval_ns, s);
        });
        let entries: Vec<usize> = (0..count as usize)
            .map(|i| (next_entry + i) % cfg.regions as usize)
            .collect();
        next_entry += count as usize;
        world
            .migrate_cache_regions(cache, &entries, &[target], false)
            .map_err(|e| e.to_string())?;
        cursor = world.now();
    }
    let rows2 = Arc::clone(&rows);
    driver.run(&mut world, horizon, interval_ns, move |s| {
        push_demo_row(&rows2, interval_ns, s);
    });
    driver.drain(&mut world);
    while world.cache(cache).migration.is_some() {
        if !world.step() {
            break;
        }
    }

    // ack audit: every acknowledged write must be present in the final
    // bytes. After the drain every issued write completed (the driver saw
    // no errors), so the expected map replays each writer's issue order.
    assert_eq!(
        driver.errors.load(std::sync::atomic::Ordering::Relaxed),
        0,
        "demo ops must not fail"
    );
    let total_writes = driver.total_writes;
    let issued = driver.issued_counts();
    let mut expected: std::collections::HashMap<u64, u64> = std::collections::HashMap::new();
    for (w, &n) in issued[cfg.reader_threads..].iter().enumerate() {
        let writers = cfg.writer_threads as u64;
        for seq in 0..n {
            let slot = seq.wrapping_mul(writers).wrapping_add(w as u64) % (blocks / 2);
            let addr = slot * 2 * 64;
            let value = ((w as u64) << 56) | seq;
            expected.insert(addr, value);
        }
    }
    let mut lost = 0u64;
    {
        let sink: Arc<Mutex<Vec<(u64, Result<Vec<u8>, _>)>>> = Arc::new(Mutex::new(Vec::new()));
        for (&addr, _) in expected.iter() {
            let sink2 = Arc::clone(&sink);
            world
                .cache_read(
                    cache,
                    0,
                    addr,
                    8,
                    Box::new(move |outcome| {
                        sink2.lock().unwrap().push((addr, outcome.result));
                    }),
                )
                .map_err(|e| e.to_string())?;
        }
        world.run_cache_quiescent(cache);
        for (addr, result) in sink.lock().unwrap().iter() {
            match result {
                Ok(bytes) => {
                    let got = u64::from_le_bytes(bytes[..8].try_into().unwrap());
                    if got != expected[addr] {
                        lost += 1;
                    }
                }
                Err(_) => lost += 1,
            }
        }
    }

    let rows = Arc::try_unwrap(rows).expect("rows free").into_inner().unwrap();
    let stats = world.cache(cache).core.stats;
    let mig_s_per_region =
        NetworkModel::default().migration_seconds(cfg.region_size);
    let (write_dips, read_dips) =
        dips_per_migration(&rows, &cfg.schedule, cfg.interval_s, mig_s_per_region);
    Ok(MigrateDemoOutcome {
        rows,
        reads_paused: stats.reads_paused_by_migration,
        writes_paused: stats.writes_paused,
        acked_writes: total_writes,
        lost_writes: lost,
        write_dips,
        read_dips,
    })
}

fn push_demo_row(rows: &Arc<Mutex<Vec<DemoRow>>>, interval_ns: u64, s: IntervalStats) {
    // partial slivers at segment boundaries would distort rates
    if s.end_ns - s.start_ns < interval_ns / 2 {
        return;
    }
    rows.lock().unwrap().push(DemoRow {
        t_s: s.end_ns as f64 / 1e9,
        read_mops: s.read_mops(),
        write_mops: s.write_mops(),
        read_ops: s.reads_done,
        write_ops: s.writes_done,
        duration_s: (s.end_ns - s.start_ns) as f64 / 1e9,
    });
}

/// Relative throughput dip per scheduled migration: the average rate over
/// the migration's own span (k regions at the calibrated per-region copy
/// time, plus one settling interval) against the pre-migration baseline.
fn dips_per_migration(
    rows: &[DemoRow],
    schedule: &[(f64, u32)],
    interval_s: f64,
    mig_s_per_region: f64,
) -> (Vec<f64>, Vec<f64>) {
    if rows.is_empty() || schedule.is_empty() {
        return (Vec::new(), Vec::new());
    }
    let first_migration = schedule.iter().map(|&(t, _)| t).fold(f64::INFINITY, f64::min);
    let window_rate = |lo: f64, hi: f64| -> (f64, f64) {
        let mut r_ops = 0u64;
        let mut w_ops = 0u64;
        let mut dur = 0.0;
        for row in rows.iter().filter(|r| r.t_s > lo + 1e-9 && r.t_s <= hi + 1e-9) {
            r_ops += row.read_ops;
            w_ops += row.write_ops;
            dur += row.duration_s;
        }
        if dur <= 0.0 {
            (0.0, 0.0)
        } else {
            (r_ops as f64 / dur / 1e6, w_ops as f64 / dur / 1e6)
        }
    };
    let (base_r, base_w) = window_rate(0.0, first_migration);
    let mut write_dips = Vec::new();
    let mut read_dips = Vec::new();
    for &(t, k) in schedule {
        let hi = t + k as f64 * mig_s_per_region + interval_s;
        let (rate_r, rate_w) = window_rate(t, hi);
        write_dips.push(if base_w > 0.0 {
            (1.0 - rate_w / base_w).max(0.0)
        } else {
            0.0
        });
        read_dips.push(if base_r > 0.0 {
            (1.0 - rate_r / base_r).max(0.0)
        } else {
            0.0
        });
    }
    (write_dips, read_dips)
}
