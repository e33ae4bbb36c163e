//! Measurement-backed performance oracle: runs the simulated transport
//! under a configuration at steady state and reports observed latency and
//! throughput. This is the oracle offline modeling uses when models should
//! reflect the simulated backend instead of the analytic profile.

use std::collections::BTreeMap;

use crate::perfmodel::{OracleError, PerfOracle, PerfPoint};
use crate::sim::world::{ConnOwner, SimWorld};
use crate::transport::netmodel::NetworkModel;
use crate::transport::{OpKind, PostOutcome, Request};
use crate::types::{CacheId, NetworkDistance, RdmaConfig, VmId};

/// Oracle that measures each configuration on the simulated backend.
#[derive(Debug, Clone)]
pub struct SimMeasuredOracle {
    pub model: NetworkModel,
    /// Batches measured per connection after warmup.
    pub batches_per_conn: u32,
    /// Warmup batches per connection, excluded from the averages.
    pub warmup_batches: u32,
    pub noise_seed: u64,
}

impl SimMeasuredOracle {
    pub fn new(model: NetworkModel) -> Self {
        SimMeasuredOracle {
            model,
            batches_per_conn: 200,
            warmup_batches: 50,
            noise_seed: 0,
        }
    }

    /// Lattice corners that are not runnable configurations clamp to the
    /// nearest runnable one: server threads never exceed connections, and
    /// without server threads the batch size collapses to one.
    fn clamp(cfg: &RdmaConfig) -> RdmaConfig {
        let mut c = *cfg;
        c.server_threads = c.server_threads.min(c.client_threads);
        if c.server_threads == 0 {
            c.batch_size = 1;
        }
        c
    }

    /// Runs one direction (all reads or all writes) and returns
    /// (mean latency us, mops).
    fn run_direction(
        &self,
        cfg: &RdmaConfig,
        record_size: u64,
        distance: NetworkDistance,
        op: OpKind,
    ) -> (f64, f64) {
        let region_size: u64 = 1 << 20;
        let mut world = SimWorld::new(self.model.clone(), self.noise_seed);
        let slot = world.add_server(VmId(1), region_size, region_size, cfg.server_threads);
        let conns: Vec<usize> = (0..cfg.client_threads)
            .map(|_| {
                world
                    .connect(slot, CacheId(1), 1, cfg, distance, ConnOwner::Collector)
                    .expect("measurement connect")
                    .0
            })
            .collect();
        let region = world.servers[slot].core.regions_of(CacheId(1))[0].0;

        let b = cfg.batch_size;
        let mut next_offset = 0u64;
        let mut make_batch = |world: &mut SimWorld, conn: usize| -> u64 {
            let reqs: Vec<Request> = (0..b)
                .map(|_| {
                    let offset = next_offset % (region_size - record_size);
                    next_offset += record_size;
                    match op {
                        OpKind::Read => Request::read(region, offset, record_size as u32, 0),
                        OpKind::Write => {
                            Request::write(region, offset, vec![0x5a; record_size as usize], 0)
                        }
                    }
                })
                .collect();
            match world.post_batch(conn, reqs) {
                Ok(PostOutcome::Accepted { batch_id }) => batch_id,
                other => panic!("measurement post failed: {other:?}"),
            }
        };

        let mut post_time: BTreeMap<(usize, u64), u64> = BTreeMap::new();
        // prime the full queue depth on every connection
        for &conn in &conns {
            for _ in 0..cfg.queue_depth {
                let t = world.now();
                let id = make_batch(&mut world, conn);
                post_time.insert((conn, id), t);
            }
        }
        let warm_target = self.warmup_batches as u64 * conns.len() as u64;
        let total_target = (self.warmup_batches + self.batches_per_conn) as u64 * conns.len() as u64;
        let mut completed = 0u64;
        let mut measured_batches = 0u64;
        let mut latency_sum = 0.0f64;
        let mut window_start = None;
        let mut window_ops = 0u64;
        while completed < total_target {
            if !world.step() {
                panic!("measurement deadlocked");
            }
            for (conn, completion) in world.take_collected() {
                let batch_id = completion.batch_id();
                let posted = post_time.remove(&(conn, batch_id)).expect("posted batch");
                completed += 1;
                if completed == warm_target {
                    window_start = Some(world.now());
                }
                if completed > warm_target {
                    latency_sum += (world.now() - posted) as f64 / 1000.0;
                    measured_batches += 1;
                    window_ops += b as u64;
                }
                if completed < total_target {
                    let t = world.now();
                    let id = make_batch(&mut world, conn);
                    post_time.insert((conn, id), t);
                }
            }
        }
        let window_ns = (world.now() - window_start.expect("window opened")) as f64;
        let mean_latency_us = latency_sum / measured_batches.max(1) as f64;
        let mops = window_ops as f64 * 1000.0 / window_ns.max(1.0);
        (mean_latency_us, mops)
    }

    pub fn measure(
        &self,
        cfg: &RdmaConfig,
        record_size: u64,
        distance: NetworkDistance,
    ) -> PerfPoint {
        let cfg = Self::clamp(cfg);
        let (read_latency_us, read_mops) =
            self.run_direction(&cfg, record_size, distance, OpKind::Read);
        let (write_latency_us, write_mops) =
            self.run_direction(&cfg, record_size, distance, OpKind::Write);
        PerfPoint {
            read_latency_us,
            write_latency_us,
            read_mops,
            write_mops,
        }
    }
}

impl PerfOracle for SimMeasuredOracle {
    fn evaluate(
        &mut self,
        cfg: &RdmaConfig,
        record_size: u64,
        distance: NetworkDistance,
    ) -> Result<PerfPoint, OracleError> {
        Ok(self.measure(cfg, record_size, distance))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn measurement_is_deterministic() {
        let oracle = SimMeasuredOracle::new(NetworkModel::default());
        let cfg = RdmaConfig::new(2, 1, 4, 4).unwrap();
        let a = oracle.measure(&cfg, 8, NetworkDistance::IntraRack);
        let b = oracle.measure(&cfg, 8, NetworkDistance::IntraRack);
        assert_eq!(a, b);
    }

    #[test]
    fn unloaded_latency_matches_anchor() {
        let oracle = SimMeasuredOracle::new(NetworkModel::default());
        let cfg = RdmaConfig::new(1, 0, 1, 1).unwrap();
        let p = oracle.measure(&cfg, 8, NetworkDistance::IntraRack);
        assert!(
            (p.read_latency_us - 4.1).abs() / 4.1 < 0.05,
            "got {}",
            p.read_latency_us
        );
    }

    #[test]
    fn queue_depth_raises_throughput_here() {
        let oracle = SimMeasuredOracle::new(NetworkModel::default());
        let shallow = oracle.measure(
            &RdmaConfig::new(1, 0, 1, 1).unwrap(),
            8,
            NetworkDistance::IntraRack,
        );
        let deep = oracle.measure(
            &RdmaConfig::new(1, 0, 1, 8).unwrap(),
            8,
            NetworkDistance::IntraRack,
        );
        assert!(deep.read_mops > shallow.read_mops);
    }

    #[test]
    fn batching_with_server_threads_raises_throughput() {
        let oracle = SimMeasuredOracle::new(NetworkModel::default());
        let unbatched = oracle.measure(
            &RdmaConfig::new(2, 1, 1, 4).unwrap(),
            8,
            NetworkDistance::IntraRack,
        );
        let batched = oracle.measure(
            &RdmaConfig::new(2, 1, 32, 4).unwrap(),
            8,
            NetworkDistance::IntraRack,
        );
        assert!(batched.read_mops > unbatched.read_mops);
    }
}
