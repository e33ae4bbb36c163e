//! An SLO-driven remote memory cache over a pluggable transport.
//!
//! Applications create caches with a capacity, a latency/throughput
//! objective, and a duration; the manager picks VMs and a transfer
//! configuration that meets the objective at minimal cost, and the client
//! exposes a byte-addressable device with asynchronous reads and writes.
//! Regions migrate live when spot VMs are reclaimed, and a tiered key-value
//! store exercises the cache as a storage tier.
//!
//! Two transport backends share one wire format: a deterministic simulated
//! backend on a virtual clock, and a loopback socket backend that exercises
//! real thread interleavings.

pub mod bench;
pub mod client;
pub mod clustersim;
pub mod manager;
pub mod perfmodel;
pub mod region;
pub mod server;
pub mod sim;
pub mod tieredkv;
pub mod transport;
pub mod types;
pub mod workload;

pub use region::{RegionStatus, RegionTable};
pub use types::{
    CacheDuration, CacheId, NetworkDistance, RdmaConfig, RegionId, SearchSpaceBounds, Slo, VmId,
    VmKind, VmSpec,
};
