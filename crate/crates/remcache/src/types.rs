//! Shared value types: SLOs, transfer configurations, VM descriptions, and
//! the identifiers passed between client, servers, and the manager.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default size of one memory region: 1 GiB.
pub const DEFAULT_REGION_SIZE: u64 = 1 << 30;

/// Errors raised by the value types and the region table.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum CoreError {
    #[error("address {addr} out of bounds for capacity {capacity}")]
    AddressOutOfBounds { addr: u64, capacity: u64 },
    #[error("invalid region entry index {index} (table has {len} entries)")]
    InvalidEntry { index: usize, len: usize },
    #[error("invalid {what}: {why}")]
    InvalidValue { what: &'static str, why: String },
}

fn invalid(what: &'static str, why: impl Into<String>) -> CoreError {
    CoreError::InvalidValue {
        what,
        why: why.into(),
    }
}

/// Cache identifier issued by the manager.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CacheId(pub u64);

/// Identifier of an allocated VM.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VmId(pub u64);

/// Identifier of a physical memory region on a cache server.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RegionId(pub u32);

impl std::fmt::Display for CacheId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "cache-{}", self.0)
    }
}

impl std::fmt::Display for VmId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "vm-{}", self.0)
    }
}

/// Network distance between a cache client and a server, in switch hops.
///
/// Data centers expose three distance classes: one switch within a rack,
/// three within a cluster, five across clusters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NetworkDistance {
    IntraRack,
    IntraCluster,
    InterCluster,
}

impl NetworkDistance {
    pub const ALL: [NetworkDistance; 3] = [
        NetworkDistance::IntraRack,
        NetworkDistance::IntraCluster,
        NetworkDistance::InterCluster,
    ];

    pub fn switches(self) -> u32 {
        match self {
            NetworkDistance::IntraRack => 1,
            NetworkDistance::IntraCluster => 3,
            NetworkDistance::InterCluster => 5,
        }
    }

    pub fn from_switches(switches: u32) -> Option<Self> {
        match switches {
            1 => Some(NetworkDistance::IntraRack),
            3 => Some(NetworkDistance::IntraCluster),
            5 => Some(NetworkDistance::InterCluster),
            _ => None,
        }
    }
}

impl std::fmt::Display for NetworkDistance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.switches())
    }
}

/// Performance objective for a cache: latency ceilings and throughput floors
/// for reads and writes, at a given record size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Slo {
    /// Record size in bytes the objective is stated for.
    pub record_size: u64,
    /// Maximum average read latency, microseconds.
    pub read_latency_max_us: f64,
    /// Maximum average write latency, microseconds.
    pub write_latency_max_us: f64,
    /// Minimum read throughput, million operations per second.
    pub read_mops_min: f64,
    /// Minimum write throughput, million operations per second.
    pub write_mops_min: f64,
}

impl Slo {
    pub fn new(
        record_size: u64,
        read_latency_max_us: f64,
        write_latency_max_us: f64,
        read_mops_min: f64,
        write_mops_min: f64,
    ) -> Result<Self, CoreError> {
        if record_size == 0 {
            return Err(invalid("slo", "record_size must be >= 1"));
        }
        if !(read_latency_max_us > 0.0) || !(write_latency_max_us > 0.0) {
            return Err(invalid("slo", "latency ceilings must be > 0"));
        }
        if read_mops_min < 0.0 || write_mops_min < 0.0 {
            return Err(invalid("slo", "throughput floors must be >= 0"));
        }
        Ok(Slo {
            record_size,
            read_latency_max_us,
            write_latency_max_us,
            read_mops_min,
            write_mops_min,
        })
    }

    /// A latency-only objective: throughput floors at zero.
    pub fn latency_only(record_size: u64, latency_max_us: f64) -> Result<Self, CoreError> {
        Slo::new(record_size, latency_max_us, latency_max_us, 0.0, 0.0)
    }
}

/// The transfer configuration tuple: client threads, server threads,
/// requests per batch, and in-flight operations per connection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RdmaConfig {
    /// Client threads processing request batches (c).
    pub client_threads: u32,
    /// Server threads executing batches (s); zero means one-sided only.
    pub server_threads: u32,
    /// Requests per batch (b); must be 1 when `server_threads` is 0.
    pub batch_size: u32,
    /// In-flight operations per connection (q).
    pub queue_depth: u32,
}

impl RdmaConfig {
    pub fn new(
        client_threads: u32,
        server_threads: u32,
        batch_size: u32,
        queue_depth: u32,
    ) -> Result<Self, CoreError> {
        let cfg = RdmaConfig {
            client_threads,
            server_threads,
            batch_size,
            queue_depth,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CoreError> {
        if self.client_threads < 1 {
            return Err(invalid("config", "client_threads must be >= 1"));
        }
        if self.server_threads > self.client_threads {
            return Err(invalid(
                "config",
                format!(
                    "server_threads {} exceeds client_threads {}",
                    self.server_threads, self.client_threads
                ),
            ));
        }
        if self.batch_size < 1 {
            return Err(invalid("config", "batch_size must be >= 1"));
        }
        if self.server_threads == 0 && self.batch_size != 1 {
            return Err(invalid(
                "config",
                "batching requires server threads (batch_size must be 1 when server_threads is 0)",
            ));
        }
        if self.queue_depth < 1 {
            return Err(invalid("config", "queue_depth must be >= 1"));
        }
        Ok(())
    }

    /// True when requests bypass server threads entirely.
    pub fn one_sided_only(&self) -> bool {
        self.server_threads == 0
    }
}

impl std::fmt::Display for RdmaConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "(c={}, s={}, b={}, q={})",
            self.client_threads, self.server_threads, self.batch_size, self.queue_depth
        )
    }
}

/// Bounds of the configuration space explored by modeling and search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchSpaceBounds {
    /// Largest client thread count (C).
    pub c_max: u32,
    /// Largest batch size (B), derived from the record size.
    pub b_max: u32,
    /// Smallest admissible queue depth.
    pub q_min: u32,
    /// Largest queue depth the NIC supports (Q).
    pub q_max: u32,
}

/// Batch payloads stop paying off beyond one 4 KiB transfer, so the batch
/// size is capped at ceil(4096 / record_size) requests.
pub fn batch_cap_for_record(record_size: u64) -> u32 {
    debug_assert!(record_size >= 1);
    (4096u64.div_ceil(record_size)).max(1) as u32
}

impl SearchSpaceBounds {
    pub fn new(c_max: u32, record_size: u64, q_min: u32, q_max: u32) -> Result<Self, CoreError> {
        if record_size == 0 {
            return Err(invalid("bounds", "record_size must be >= 1"));
        }
        let bounds = SearchSpaceBounds {
            c_max,
            b_max: batch_cap_for_record(record_size),
            q_min,
            q_max,
        };
        bounds.validate()?;
        Ok(bounds)
    }

    /// Bounds with an explicit batch cap, for tests and enumeration sweeps.
    pub fn with_b_max(c_max: u32, b_max: u32, q_min: u32, q_max: u32) -> Result<Self, CoreError> {
        let bounds = SearchSpaceBounds {
            c_max,
            b_max,
            q_min,
            q_max,
        };
        bounds.validate()?;
        Ok(bounds)
    }

    pub fn validate(&self) -> Result<(), CoreError> {
        if self.c_max < 1 {
            return Err(invalid("bounds", "c_max must be >= 1"));
        }
        if self.b_max < 1 {
            return Err(invalid("bounds", "b_max must be >= 1"));
        }
        if self.q_min < 1 || self.q_min > self.q_max {
            return Err(invalid("bounds", "need 1 <= q_min <= q_max"));
        }
        Ok(())
    }

    /// Number of admissible queue-depth values.
    pub fn q_values(&self) -> u32 {
        self.q_max - self.q_min + 1
    }

    /// True when every component of `cfg` is admissible under these bounds
    /// and the structural constraints of the configuration space.
    pub fn admits(&self, cfg: &RdmaConfig) -> bool {
        cfg.validate().is_ok()
            && cfg.client_threads <= self.c_max
            && cfg.batch_size <= self.b_max
            && (self.q_min..=self.q_max).contains(&cfg.queue_depth)
    }
}

/// Whether a VM is reclaimable by the provider.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VmKind {
    OnDemand,
    Spot,
}

/// One entry of the provider's VM menu: fixed cores, memory, and price.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VmSpec {
    pub vm_type: String,
    pub cores: u32,
    pub memory: u64,
    /// Price in currency units per hour.
    pub price_per_hour: f64,
    /// Switch hops from the client; menu rows default to one switch and the
    /// allocator overwrites this with the hosting server's distance.
    #[serde(default = "default_distance")]
    pub distance_switches: u32,
    pub kind: VmKind,
}

fn default_distance() -> u32 {
    1
}

impl VmSpec {
    pub fn validate(&self, region_size: u64) -> Result<(), CoreError> {
        if self.memory < region_size {
            return Err(invalid(
                "vm_spec",
                format!(
                    "memory {} below one region ({} bytes)",
                    self.memory, region_size
                ),
            ));
        }
        Ok(())
    }

    /// Whole regions this VM type can host.
    pub fn region_capacity(&self, region_size: u64) -> u64 {
        self.memory / region_size
    }
}

/// Requested lifetime of a cache.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum CacheDuration {
    Infinite,
    Seconds(u64),
}

impl CacheDuration {
    pub fn is_finite(&self) -> bool {
        matches!(self, CacheDuration::Seconds(_))
    }
}

/// Everything the manager remembers about a provisioned cache.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CacheDescriptor {
    pub cache_id: CacheId,
    pub capacity: u64,
    pub slo: Slo,
    pub duration: CacheDuration,
    pub config: RdmaConfig,
    pub vms: Vec<VmId>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_invariants() {
        assert!(RdmaConfig::new(1, 0, 1, 1).is_ok());
        assert!(RdmaConfig::new(4, 4, 16, 8).is_ok());
        // s must not exceed c
        assert!(RdmaConfig::new(2, 3, 1, 1).is_err());
        // batching requires server threads
        assert!(RdmaConfig::new(2, 0, 2, 1).is_err());
        assert!(RdmaConfig::new(0, 0, 1, 1).is_err());
        assert!(RdmaConfig::new(1, 0, 1, 0).is_err());
    }

    #[test]
    fn batch_cap_follows_record_size() {
        assert_eq!(batch_cap_for_record(8), 512);
        assert_eq!(batch_cap_for_record(4096), 1);
        assert_eq!(batch_cap_for_record(4097), 1);
        assert_eq!(batch_cap_for_record(1), 4096);
        // cap never drops below a single request per batch
        assert_eq!(batch_cap_for_record(1 << 20), 1);
    }

    #[test]
    fn bounds_reject_inverted_queue_range() {
        assert!(SearchSpaceBounds::new(4, 8, 5, 4).is_err());
        let b = SearchSpaceBounds::new(4, 8, 4, 16).unwrap();
        assert_eq!(b.q_values(), 13);
        assert_eq!(b.b_max, 512);
    }

    #[test]
    fn slo_validation() {
        assert!(Slo::new(8, 10.0, 10.0, 0.0, 0.0).is_ok());
        assert!(Slo::new(0, 10.0, 10.0, 0.0, 0.0).is_err());
        assert!(Slo::new(8, 0.0, 10.0, 0.0, 0.0).is_err());
        assert!(Slo::new(8, 10.0, 10.0, -1.0, 0.0).is_err());
    }

    #[test]
    fn distance_round_trip() {
        for d in NetworkDistance::ALL {
            assert_eq!(NetworkDistance::from_switches(d.switches()), Some(d));
        }
        assert_eq!(NetworkDistance::from_switches(2), None);
    }
}
