//! Parametric cost model for the simulated backend: round trips per network
//! distance, serialization over a fixed bandwidth, per-operation CPU costs,
//! write inlining, and an optional seeded jitter.

use serde::{Deserialize, Serialize};

use crate::types::{NetworkDistance, RdmaConfig};

/// Nanoseconds of virtual time.
pub type SimNanos = u64;

pub fn us_to_ns(us: f64) -> SimNanos {
    (us * 1000.0).round().max(0.0) as SimNanos
}

pub fn ns_to_us(ns: SimNanos) -> f64 {
    ns as f64 / 1000.0
}

/// Cost parameters of the simulated network and hosts. Defaults are
/// calibrated so that a single 8-byte one-sided read at one switch of
/// distance completes in about 4.1 us end to end, and migrating one 1 GiB
/// region takes about 1.09 s.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkModel {
    /// Round-trip time per distance class, microseconds: 1, 3, 5 switches.
    pub base_rtt_us: [f64; 3],
    /// Link bandwidth in gigabits per second.
    pub bandwidth_gbps: f64,
    /// Client CPU to assemble and post one transfer.
    pub client_post_cost_us: f64,
    /// Client CPU to poll one completion and run callbacks.
    pub client_completion_cost_us: f64,
    /// Server thread CPU per request in a two-sided batch.
    pub server_cpu_cost_per_request_us: f64,
    /// NIC service time for a one-sided operation (no server CPU).
    pub nic_onesided_cost_us: f64,
    /// Extra host-to-NIC fetch cost for write payloads above the inline
    /// threshold.
    pub pcie_fetch_cost_us: f64,
    /// Write payloads at or below this many bytes ride inside the request.
    pub inline_threshold: u32,
    /// Sustained migration-stream rate, GiB per second.
    pub migration_gib_per_s: f64,
    /// Optional jitter amplitude; each latency component is scaled by a
    /// uniform factor in [1 - a, 1 + a]. None disables noise.
    pub noise_amplitude: Option<f64>,
}

impl Default for NetworkModel {
    fn default() -> Self {
        NetworkModel {
            base_rtt_us: [2.9, 4.7, 7.1],
            bandwidth_gbps: 100.0,
            client_post_cost_us: 0.5,
            client_completion_cost_us: 0.4,
            server_cpu_cost_per_request_us: 0.3,
            nic_onesided_cost_us: 0.3,
            pcie_fetch_cost_us: 0.6,
            inline_threshold: 172,
            migration_gib_per_s: 1.0 / 1.09,
            noise_amplitude: None,
        }
    }
}

impl NetworkModel {
    pub fn base_rtt(&self, distance: NetworkDistance) -> f64 {
        match distance {
            NetworkDistance::IntraRack => self.base_rtt_us[0],
            NetworkDistance::IntraCluster => self.base_rtt_us[1],
            NetworkDistance::InterCluster => self.base_rtt_us[2],
        }
    }

    /// Time to push `bytes` through the link, microseconds.
    pub fn wire_time_us(&self, bytes: u64) -> f64 {
        (bytes as f64) * 8.0 / (self.bandwidth_gbps * 1000.0)
    }

    /// Service time of one batch at the connection: serialization plus the
    /// CPU to process its requests.
    pub fn service_time_us(&self, batch_bytes: u64, requests: u32) -> f64 {
        self.wire_time_us(batch_bytes) + self.server_cpu_cost_per_request_us * requests as f64
    }

    /// Network latency contribution of one transfer: round trip plus
    /// serialization plus the queueing delay behind earlier in-flight
    /// operations on the same connection.
    pub fn simulate_cost(
        &self,
        config: &RdmaConfig,
        batch_bytes: u64,
        distance: NetworkDistance,
    ) -> f64 {
        let service = self.service_time_us(batch_bytes, config.batch_size);
        let queue_delay = (config.queue_depth.saturating_sub(1)) as f64 * service;
        self.base_rtt(distance) + self.wire_time_us(batch_bytes) + queue_delay
    }

    /// Seconds to migrate `bytes` at the migration-stream rate.
    pub fn migration_seconds(&self, bytes: u64) -> f64 {
        (bytes as f64) / (self.migration_gib_per_s * (1u64 << 30) as f64)
    }

    /// True when a write payload of `len` bytes can be inlined.
    pub fn inlines(&self, len: u32) -> bool {
        len <= self.inline_threshold
    }
}
