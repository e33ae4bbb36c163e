//! Configuration-space performance modeling and SLO search.
//!
//! The configuration space is a five-level tree: the root enumerates server
//! thread counts, then client threads, then batch size, then queue depth;
//! leaves hold the latency/throughput profile of the path's configuration.
//! Offline modeling measures only power-of-two grid points (with early
//! termination on throughput plateaus) and fills the rest by multilinear
//! interpolation; the online search walks the tree in pre-order with
//! pruning and returns the cheapest satisfying configuration.

mod grid;
mod model;
pub mod oracle;
mod search;
mod tree;

pub use grid::MeasurementGrid;
pub use model::{BuildOptions, GridMode, ModelBuildStats, PerfModel, PointSource};
pub use oracle::{OracleError, PerfOracle};
pub use search::{determine_q_min, preorder_scan, search, SearchOutcome};
pub use tree::{count_configs, ConfigTree};

use serde::{Deserialize, Serialize};

/// Modeled latency and throughput of one configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerfPoint {
    pub read_latency_us: f64,
    pub write_latency_us: f64,
    pub read_mops: f64,
    pub write_mops: f64,
}

impl PerfPoint {
    pub fn splat(latency_us: f64, mops: f64) -> Self {
        PerfPoint {
            read_latency_us: latency_us,
            write_latency_us: latency_us,
            read_mops: mops,
            write_mops: mops,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.read_latency_us.is_finite()
            && self.write_latency_us.is_finite()
            && self.read_mops.is_finite()
            && self.write_mops.is_finite()
    }
}
