//! The cache client: a byte-addressable device with asynchronous reads and
//! writes, region-table translation, per-application-thread FIFO completion
//! ordering, live region migration, and reshape.
//!
//! `CacheCore` holds the backend-independent logic; the simulated runtime
//! (`sim`) and the socket runtime (`socket`) drive it through their own
//! event loops.

pub mod core;
pub mod sim;
pub mod socket;

use thiserror::Error;

use crate::types::CacheId;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ClientError {
    #[error("address range out of cache bounds")]
    OutOfRange,
    #[error("cache {0} was deleted")]
    StaleCache(CacheId),
    #[error("region {0} unavailable after a failed migration")]
    RegionFailed(usize),
    #[error("write queue full, retry")]
    Backpressured,
    #[error("transport failure")]
    TransportFailed,
    #[error("slo unsatisfiable")]
    SloUnsatisfiable,
    #[error("insufficient cluster capacity")]
    CapacityUnavailable,
    #[error("{0}")]
    Other(String),
}

/// Kind of application-visible operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AppOpKind {
    Read,
    Write,
}

/// What a completed operation hands to its callback: read bytes on success
/// (writes carry an empty payload).
#[derive(Debug)]
pub struct OpOutcome {
    pub kind: AppOpKind,
    pub result: Result<Vec<u8>, ClientError>,
}

pub type OpCallback = Box<dyn FnOnce(OpOutcome) + Send>;

/// Migration behavior toggles. Both default on; turning them off reproduces
/// the baseline that pauses reads to migrating regions and all writes.
#[derive(Debug, Clone, Copy)]
pub struct MigrationOptimizations {
    /// Serve reads to a migrating region from the old VM instead of
    /// pausing them.
    pub unpaused_reads: bool,
    /// Pause only writes to the region being migrated instead of all
    /// writes.
    pub pause_on_migration_writes: bool,
}

impl Default for MigrationOptimizations {
    fn default() -> Self {
        MigrationOptimizations {
            unpaused_reads: true,
            pause_on_migration_writes: true,
        }
    }
}

/// Client-side counters, mostly about migration impact.
#[derive(Debug, Clone, Copy, Default)]
pub struct ClientStats {
    pub ops_issued: u64,
    pub ops_completed: u64,
    /// Reads that stalled because their region was migrating and unpaused
    /// reads were disabled.
    pub reads_paused_by_migration: u64,
    /// Reads that stalled behind a queued write they overlapped.
    pub dependent_reads_paused: u64,
    /// Writes queued while their target region migrated.
    pub writes_paused: u64,
    /// Operations that failed because their region was lost.
    pub region_failures: u64,
}
