//! Benchmarks and experiment harnesses over the simulated backend: the
//! measurement-backed oracle, closed-loop drivers, the cache and tiered-KV
//! benchmarks, and the migration demonstration.

pub mod driver;
pub mod harness;
pub mod measure;
pub mod tiered;

pub use driver::{CacheDriver, CacheOp, IntervalStats, OpSource};
pub use harness::{
    demo_rows_to_csv, rows_to_csv, run_cache_bench, run_migrate_demo, run_tiered_bench, BenchRow,
    CacheBenchConfig, MigrateDemoConfig, MigrateDemoOutcome, TieredBenchConfig,
};
pub use measure::SimMeasuredOracle;
pub use tiered::{SsdTiming, TieredSimConfig};
