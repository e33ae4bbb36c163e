use remcache::bench::{run_migrate_demo, MigrateDemoConfig};
use remcache::client::MigrationOptimizations;

fn main() {
    for (name, opts) in [
        ("on", MigrationOptimizations::default()),
        ("off", MigrationOptimizations { unpaused_reads: false, pause_on_migration_writes: false }),
    ] {
        let cfg = MigrateDemoConfig {
            regions: 7,
            region_size: 32 << 20,
            schedule: vec![(1.0, 1), (2.0, 2), (3.0, 4)],
            horizon_s: 4.0,
            interval_s: 0.03125,
            reader_threads: 1,
            writer_threads: 1,
            window: 8192,
            optimizations: opts,
            seed: 5,
        };
        let out = run_migrate_demo(&cfg).unwrap();
        println!("== mode {name}: reads_paused={} writes_paused={} lost={} acked={}", out.reads_paused, out.writes_paused, out.lost_writes, out.acked_writes);
        println!("  write_dips={:?}", out.write_dips.iter().map(|d| (d*1000.0).round()/10.0).collect::<Vec<_>>());
        println!("  read_dips={:?}", out.read_dips.iter().map(|d| (d*1000.0).round()/10.0).collect::<Vec<_>>());
    }
}
