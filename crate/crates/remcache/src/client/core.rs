//! Backend-independent client state machine.
//!
//! Responsibilities: translate device addresses through the region table
//! into per-region sub-operations, keep per-application-thread completion
//! order equal to issue order (a completed operation retires only after all
//! earlier operations of its thread), and implement migration semantics:
//! writes to a migrating region are queued, reads are served by the old VM
//! while it still owns the region, and reads that overlap a queued write
//! wait behind it.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::client::{
    AppOpKind, ClientError, ClientStats, MigrationOptimizations, OpCallback, OpOutcome,
};
use crate::region::RegionTable;
use crate::types::{CacheId, RdmaConfig, RegionId, VmId};

/// A routed sub-operation, ready for the transport pipeline.
#[derive(Debug)]
pub struct RoutedSub {
    pub tag: u64,
    pub client_thread: usize,
    pub vm: VmId,
    pub region: RegionId,
    pub offset: u64,
    pub len: u32,
    pub kind: AppOpKind,
    pub payload: Vec<u8>,
}

/// A sub-operation waiting out a migration pause.
#[derive(Debug)]
struct QueuedSub {
    tag: u64,
    entry: usize,
    region_offset: u64,
    len: u64,
    kind: AppOpKind,
    payload: Vec<u8>,
    app_thread: usize,
}

struct OpState {
    app_thread: usize,
    seq: u64,
    kind: AppOpKind,
    remaining: usize,
    failed: Option<ClientError>,
    read_buf: Vec<u8>,
    callback: Option<OpCallback>,
}

struct SubRef {
    op_id: u64,
    /// Where a read sub-extent lands in the parent's buffer.
    dst_offset: usize,
}

#[derive(Default)]
struct AppThread {
    next_seq: u64,
    next_retire: u64,
    /// Finished but unretired operations, by sequence number.
    finished: BTreeMap<u64, (Option<OpCallback>, OpOutcome)>,
}

/// Ready-to-run callback released in issue order: (app thread, callback,
/// outcome).
pub type ReadyCallback = (usize, OpCallback, OpOutcome);

pub struct CacheCore {
    pub cache_id: CacheId,
    pub table: RegionTable,
    pub config: RdmaConfig,
    pub opts: MigrationOptimizations,
    pub stats: ClientStats,
    app: Vec<AppThread>,
    ops: BTreeMap<u64, OpState>,
    subs: BTreeMap<u64, SubRef>,
    next_op: u64,
    next_sub: u64,
    migrating: BTreeSet<usize>,
    failed_entries: BTreeSet<usize>,
    queued: VecDeque<QueuedSub>,
    /// Byte extents of queued writes per entry, for dependent-read checks.
    queued_write_extents: BTreeMap<usize, Vec<(u64, u64)>>,
    write_queue_cap: usize,
    deleted: bool,
}

/// What `issue` produced: sub-operations to hand to the transport now, and
/// callbacks already releasable (immediate errors unblocked in FIFO order).
#[derive(Default)]
pub struct IssueOutput {
    pub routed: Vec<RoutedSub>,
    pub ready: Vec<ReadyCallback>,
}

impl CacheCore {
    pub fn new(
        cache_id: CacheId,
        table: RegionTable,
        config: RdmaConfig,
        app_threads: usize,
        opts: MigrationOptimizations,
    ) -> Self {
        CacheCore {
            cache_id,
            table,
            config,
            opts,
            stats: ClientStats::default(),
            app: (0..app_threads).map(|_| AppThread::default()).collect(),
            ops: BTreeMap::new(),
            subs: BTreeMap::new(),
            next_op: 1,
            next_sub: 1,
            migrating: BTreeSet::new(),
            failed_entries: BTreeSet::new(),
            queued: VecDeque::new(),
            queued_write_extents: BTreeMap::new(),
            write_queue_cap: 1 << 20,
            deleted: false,
        }
    }

    pub fn app_threads(&self) -> usize {
        self.app.len()
    }

    pub fn client_thread_of(&self, app_thread: usize) -> usize {
        app_thread % self.config.client_threads as usize
    }

    pub fn mark_deleted(&mut self) {
        self.deleted = true;
    }

    pub fn is_deleted(&self) -> bool {
        self.deleted
    }

    pub fn live_ops(&self) -> usize {
        self.ops.len()
    }

    pub fn queued_len(&self) -> usize {
        self.queued.len()
    }

    pub fn migrating_entries(&self) -> impl Iterator<Item = usize> + '_ {
        self.migrating.iter().copied()
    }

    pub fn failed_entry_indices(&self) -> Vec<usize> {
        self.failed_entries.iter().copied().collect()
    }

    /// Issues one asynchronous read or write. Returns the sub-operations to
    /// route plus any callbacks that became releasable immediately.
    pub fn issue(
        &mut self,
        app_thread: usize,
        kind: AppOpKind,
        addr: u64,
        len: u64,
        payload: Option<Vec<u8>>,
        callback: OpCallback,
    ) -> Result<IssueOutput, ClientError> {
        assert!(app_thread < self.app.len(), "app thread out of range");
        if kind == AppOpKind::Write {
            let p = payload.as_ref().map_or(0, Vec::len) as u64;
            assert_eq!(p, len, "write payload must match len");
        }
        // backpressure before any side effect
        if kind == AppOpKind::Write && self.queued.len() >= self.write_queue_cap {
            return Err(ClientError::Backpressured);
        }
        self.stats.ops_issued += 1;
        let seq = self.app[app_thread].next_seq;
        self.app[app_thread].next_seq += 1;
        let op_id = self.next_op;
        self.next_op += 1;

        let mut failed = None;
        if self.deleted {
            failed = Some(ClientError::StaleCache(self.cache_id));
        }
        let parts = if failed.is_none() {
            match self.table.split(addr, len) {
                Ok(parts) => {
                    if let Some(bad) = parts
                        .iter()
                        .find(|p| self.failed_entries.contains(&p.entry_index))
                    {
                        self.stats.region_failures += 1;
                        failed = Some(ClientError::RegionFailed(bad.entry_index));
                        Vec::new()
                    } else {
                        parts
                    }
                }
                Err(_) => {
                    failed = Some(ClientError::OutOfRange);
                    Vec::new()
                }
            }
        } else {
            Vec::new()
        };

        let mut out = IssueOutput::default();
        if let Some(err) = failed {
            // immediate error: runs through retirement to keep FIFO order
            let op = OpState {
                app_thread,
                seq,
                kind,
                remaining: 0,
                failed: Some(err),
                read_buf: Vec::new(),
                callback: Some(callback),
            };
            self.ops.insert(op_id, op);
            out.ready = self.finish_op(op_id);
            return Ok(out);
        }

        self.ops.insert(
            op_id,
            OpState {
                app_thread,
                seq,
                kind,
                remaining: parts.len(),
                failed: None,
                read_buf: if kind == AppOpKind::Read {
                    vec![0u8; len as usize]
                } else {
                    Vec::new()
                },
                callback: Some(callback),
            },
        );

        let payload = payload.unwrap_or_default();
        let mut consumed = 0usize;
        for part in parts {
            let tag = self.next_sub;
            self.next_sub += 1;
            let dst_offset = consumed;
            let part_payload = if kind == AppOpKind::Write {
                payload[consumed..consumed + part.len as usize].to_vec()
            } else {
                Vec::new()
            };
            consumed += part.len as usize;
            self.subs.insert(tag, SubRef { op_id, dst_offset });
            if self.must_queue(kind, part.entry_index, part.region_offset, part.len) {
                self.enqueue_paused(QueuedSub {
                    tag,
                    entry: part.entry_index,
                    region_offset: part.region_offset,
                    len: part.len,
                    kind,
                    payload: part_payload,
                    app_thread,
                });
            } else {
                out.routed
                    .push(self.route(tag, app_thread, part.entry_index, part.region_offset, part.len, kind, part_payload));
            }
        }
        Ok(out)
    }

    fn route(
        &self,
        tag: u64,
        app_thread: usize,
        entry: usize,
        region_offset: u64,
        len: u64,
        kind: AppOpKind,
        payload: Vec<u8>,
    ) -> RoutedSub {
        let e = self.table.entry(entry).expect("routed entry exists");
        RoutedSub {
            tag,
            client_thread: self.client_thread_of(app_thread),
            vm: e.vm_id,
            region: e.physical_region_id,
            offset: region_offset,
            len: len as u32,
            kind,
            payload,
        }
    }

    fn must_queue(&mut self, kind: AppOpKind, entry: usize, off: u64, len: u64) -> bool {
        match kind {
            AppOpKind::Write => {
                if self.migrating.contains(&entry) {
                    self.stats.writes_paused += 1;
                    true
                } else if !self.migrating.is_empty() && !self.opts.pause_on_migration_writes {
                    // baseline behavior: every write pauses while any
                    // region migrates
                    self.stats.writes_paused += 1;
                    true
                } else {
                    false
                }
            }
            AppOpKind::Read => {
                if self.overlaps_queued_write(entry, off, len) {
                    self.stats.dependent_reads_paused += 1;
                    true
                } else if self.migrating.contains(&entry) && !self.opts.unpaused_reads {
                    self.stats.reads_paused_by_migration += 1;
                    true
                } else {
                    false
                }
            }
        }
    }

    fn overlaps_queued_write(&self, entry: usize, off: u64, len: u64) -> bool {
        self.queued_write_extents
            .get(&entry)
            .is_some_and(|spans| spans.iter().any(|&(s, l)| off < s + l && s < off + len))
    }

    fn enqueue_paused(&mut self, sub: QueuedSub) {
        if sub.kind == AppOpKind::Write {
            self.queued_write_extents
                .entry(sub.entry)
                .or_default()
                .push((sub.region_offset, sub.len));
        }
        self.queued.push_back(sub);
    }

    // ---- migration ---------------------------------------------------

    /// Marks an entry as migrating; subsequent writes to it queue.
    pub fn begin_entry_migration(&mut self, entry: usize) {
        self.migrating.insert(entry);
        if let Ok(e) = self.table.entry_mut(entry) {
            e.status = crate::region::RegionStatus::Migrating;
        }
    }

    /// Completes an entry's migration: remaps the table to the new region
    /// and re-evaluates every queued sub-operation in arrival order.
    /// Returns the sub-operations that can now be routed.
    pub fn complete_entry_migration(
        &mut self,
        entry: usize,
        new_vm: VmId,
        new_region: RegionId,
    ) -> Vec<RoutedSub> {
        self.migrating.remove(&entry);
        self.table
            .remap(entry, new_vm, new_region)
            .expect("migrated entry exists");
        self.drain_queued()
    }

    /// Aborts an entry's migration leaving the old mapping active (e.g.
    /// the target died); queued ops drain back to the old VM.
    pub fn abort_entry_migration(&mut self, entry: usize) -> Vec<RoutedSub> {
        self.migrating.remove(&entry);
        if let Ok(e) = self.table.entry_mut(entry) {
            e.status = crate::region::RegionStatus::Active;
        }
        self.drain_queued()
    }

    /// Marks an entry permanently failed (its VM died before migration
    /// finished); queued ops against it fail, later ops error.
    pub fn fail_entry(&mut self, entry: usize) -> Vec<ReadyCallback> {
        self.migrating.remove(&entry);
        self.failed_entries.insert(entry);
        let mut ready = Vec::new();
        let queued = std::mem::take(&mut self.queued);
        self.queued_write_extents.clear();
        for sub in queued {
            if sub.entry == entry {
                self.stats.region_failures += 1;
                ready.extend(self.sub_result(sub.tag, Err(ClientError::RegionFailed(entry))));
            } else {
                self.enqueue_paused(sub);
            }
        }
        ready
    }

    /// Re-evaluates the pause condition for every queued sub-operation,
    /// preserving arrival order for those that must stay queued.
    fn drain_queued(&mut self) -> Vec<RoutedSub> {
        let queued = std::mem::take(&mut self.queued);
        self.queued_write_extents.clear();
        let mut routed = Vec::new();
        for sub in queued {
            // drain re-evaluation must not recount pause statistics
            let stats_before = self.stats;
            let still_paused = self.must_queue(sub.kind, sub.entry, sub.region_offset, sub.len);
            self.stats = stats_before;
            if still_paused {
                self.enqueue_paused(sub);
            } else {
                routed.push(self.route(
                    sub.tag,
                    sub.app_thread,
                    sub.entry,
                    sub.region_offset,
                    sub.len,
                    sub.kind,
                    sub.payload,
                ));
            }
        }
        routed
    }

    // ---- completion path ----------------------------------------------

    /// Records one sub-operation result. Returns callbacks that became
    /// releasable, in per-thread issue order.
    pub fn sub_result(
        &mut self,
        tag: u64,
        result: Result<Vec<u8>, ClientError>,
    ) -> Vec<ReadyCallback> {
        let sub = match self.subs.remove(&tag) {
            Some(s) => s,
            None => return Vec::new(),
        };
        let op = self.ops.get_mut(&sub.op_id).expect("sub has live op");
        match result {
            Ok(bytes) => {
                if op.kind == AppOpKind::Read {
                    let dst = &mut op.read_buf[sub.dst_offset..sub.dst_offset + bytes.len()];
                    dst.copy_from_slice(&bytes);
                }
            }
            Err(e) => {
                if op.failed.is_none() {
                    op.failed = Some(e);
                }
            }
        }
        op.remaining -= 1;
        if op.remaining == 0 {
            self.finish_op(sub.op_id)
        } else {
            Vec::new()
        }
    }

    fn finish_op(&mut self, op_id: u64) -> Vec<ReadyCallback> {
        let mut op = self.ops.remove(&op_id).expect("finishing live op");
        self.stats.ops_completed += 1;
        let outcome = OpOutcome {
            kind: op.kind,
            result: match op.failed.take() {
                Some(e) => Err(e),
                None => Ok(std::mem::take(&mut op.read_buf)),
            },
        };
        let app_thread = op.app_thread;
        let thread = &mut self.app[app_thread];
        thread.finished.insert(op.seq, (op.callback.take(), outcome));
        // release the in-order prefix
        let mut ready = Vec::new();
        while let Some((cb, outcome)) = thread.finished.remove(&thread.next_retire) {
            thread.next_retire += 1;
            if let Some(cb) = cb {
                ready.push((app_thread, cb, outcome));
            }
        }
        ready
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::{Arc, Mutex};

    const RSZ: u64 = 1024;

    fn table(regions: u32) -> RegionTable {
        RegionTable::new(
            RSZ,
            regions as u64 * RSZ,
            (0..regions).map(|i| (VmId(1), RegionId(i))).collect(),
        )
        .unwrap()
    }

    fn core(regions: u32, threads: usize) -> CacheCore {
        CacheCore::new(
            CacheId(1),
            table(regions),
            RdmaConfig::new(2, 1, 4, 4).unwrap(),
            threads,
            MigrationOptimizations::default(),
        )
    }

    fn recorder() -> (Arc<Mutex<Vec<String>>>, impl Fn(&str) -> OpCallback) {
        let log = Arc::new(Mutex::new(Vec::new()));
        let log2 = Arc::clone(&log);
        let make = move |name: &str| -> OpCallback {
            let log = Arc::clone(&log2);
            let name = name.to_string();
            Box::new(move |outcome: OpOutcome| {
                let status = if outcome.result.is_ok() { "ok" } else { "err" };
                log.lock().unwrap().push(format!("{name}:{status}"));
            })
        };
        (log, make)
    }

    #[test]
    fn splits_across_regions_and_reassembles() {
        let mut c = core(3, 1);
        let (log, cb) = recorder();
        let out = c
            .issue(0, AppOpKind::Write, RSZ - 4, 8, Some(b"abcdefgh".to_vec()), cb("w"))
            .unwrap();
        assert_eq!(out.routed.len(), 2);
        assert_eq!(out.routed[0].payload, b"abcd");
        assert_eq!(out.routed[1].payload, b"efgh");
        let tags: Vec<u64> = out.routed.iter().map(|r| r.tag).collect();
        assert!(c.sub_result(tags[0], Ok(Vec::new())).is_empty());
        let ready = c.sub_result(tags[1], Ok(Vec::new()));
        assert_eq!(ready.len(), 1);
        for (_, cb, outcome) in ready {
            cb(outcome);
        }
        assert_eq!(log.lock().unwrap().as_slice(), ["w:ok"]);
    }

    #[test]
    fn out_of_range_fails_immediately_in_order() {
        let mut c = core(2, 1);
        let (log, cb) = recorder();
        // issue a slow op, then an out-of-range one: the error callback
        // must wait for the first to retire
        let out1 = c.issue(0, AppOpKind::Read, 0, 8, None, cb("a")).unwrap();
        let out2 = c
            .issue(0, AppOpKind::Read, 10 * RSZ, 8, None, cb("b"))
            .unwrap();
        assert!(out2.ready.is_empty(), "error waits behind op a");
        let ready = c.sub_result(out1.routed[0].tag, Ok(vec![0; 8]));
        assert_eq!(ready.len(), 2);
        for (_, cb, outcome) in ready {
            cb(outcome);
        }
        assert_eq!(log.lock().unwrap().as_slice(), ["a:ok", "b:err"]);
    }

    #[test]
    fn per_thread_retirement_is_fifo() {
        let mut c = core(2, 2);
        let (log, cb) = recorder();
        let o1 = c.issue(0, AppOpKind::Read, 0, 4, None, cb("t0-a")).unwrap();
        let o2 = c.issue(0, AppOpKind::Read, 4, 4, None, cb("t0-b")).unwrap();
        let o3 = c.issue(1, AppOpKind::Read, 8, 4, None, cb("t1-a")).unwrap();
        // complete out of order: b then t1-a then a
        assert!(c.sub_result(o2.routed[0].tag, Ok(vec![0; 4])).is_empty());
        let r3 = c.sub_result(o3.routed[0].tag, Ok(vec![0; 4]));
        assert_eq!(r3.len(), 1, "other thread retires independently");
        let r1 = c.sub_result(o1.routed[0].tag, Ok(vec![0; 4]));
        assert_eq!(r1.len(), 2, "a releases itself and b");
        for (_, cb, outcome) in r3.into_iter().chain(r1) {
            cb(outcome);
        }
        assert_eq!(log.lock().unwrap().as_slice(), ["t1-a:ok", "t0-a:ok", "t0-b:ok"]);
    }

    #[test]
    fn writes_to_migrating_region_queue_and_drain() {
        let mut c = core(3, 1);
        let (_, cb) = recorder();
        c.begin_entry_migration(1);
        let out = c
            .issue(0, AppOpKind::Write, RSZ, 4, Some(b"abcd".to_vec()), cb("w"))
            .unwrap();
        assert!(out.routed.is_empty());
        assert_eq!(c.queued_len(), 1);
        // writes to other regions proceed
        let out2 = c
            .issue(0, AppOpKind::Write, 0, 4, Some(b"wxyz".to_vec()), cb("w2"))
            .unwrap();
        assert_eq!(out2.routed.len(), 1);
        // cutover reroutes to the new region
        let drained = c.complete_entry_migration(1, VmId(9), RegionId(40));
        assert_eq!(drained.len(), 1);
        assert_eq!(drained[0].vm, VmId(9));
        assert_eq!(drained[0].region, RegionId(40));
        assert_eq!(c.stats.writes_paused, 1);
    }

    #[test]
    fn unpaused_reads_use_old_vm_but_dependent_reads_wait() {
        let mut c = core(2, 1);
        let (_, cb) = recorder();
        c.begin_entry_migration(0);
        // plain read: routed to the old mapping
        let out = c.issue(0, AppOpKind::Read, 0, 4, None, cb("r")).unwrap();
        assert_eq!(out.routed.len(), 1);
        assert_eq!(out.routed[0].vm, VmId(1));
        // overlapping write queues, then the read of the same range queues
        let w = c
            .issue(0, AppOpKind::Write, 8, 4, Some(b"abcd".to_vec()), cb("w"))
            .unwrap();
        assert!(w.routed.is_empty());
        let r2 = c.issue(0, AppOpKind::Read, 8, 4, None, cb("r2")).unwrap();
        assert!(r2.routed.is_empty());
        assert_eq!(c.stats.dependent_reads_paused, 1);
        assert_eq!(c.stats.reads_paused_by_migration, 0);
        // drain preserves arrival order: write first, then the read
        let drained = c.complete_entry_migration(0, VmId(2), RegionId(7));
        assert_eq!(drained.len(), 2);
        assert_eq!(drained[0].kind, AppOpKind::Write);
        assert_eq!(drained[1].kind, AppOpKind::Read);
    }

    #[test]
    fn paused_reads_without_optimization() {
        let mut c = CacheCore::new(
            CacheId(1),
            table(2),
            RdmaConfig::new(1, 0, 1, 4).unwrap(),
            1,
            MigrationOptimizations {
                unpaused_reads: false,
                pause_on_migration_writes: true,
            },
        );
        let (_, cb) = recorder();
        c.begin_entry_migration(0);
        let out = c.issue(0, AppOpKind::Read, 0, 4, None, cb("r")).unwrap();
        assert!(out.routed.is_empty());
        assert_eq!(c.stats.reads_paused_by_migration, 1);
    }

    #[test]
    fn baseline_pauses_all_writes() {
        let mut c = CacheCore::new(
            CacheId(1),
            table(3),
            RdmaConfig::new(1, 0, 1, 4).unwrap(),
            1,
            MigrationOptimizations {
                unpaused_reads: true,
                pause_on_migration_writes: false,
            },
        );
        let (_, cb) = recorder();
        c.begin_entry_migration(2);
        // a write to an unrelated region still queues in baseline mode
        let out = c
            .issue(0, AppOpKind::Write, 0, 4, Some(b"abcd".to_vec()), cb("w"))
            .unwrap();
        assert!(out.routed.is_empty());
        let drained = c.complete_entry_migration(2, VmId(2), RegionId(9));
        assert_eq!(drained.len(), 1);
    }

    #[test]
    fn failed_entry_rejects_ops_and_fails_queued() {
        let mut c = core(2, 1);
        let (log, cb) = recorder();
        c.begin_entry_migration(1);
        let _ = c
            .issue(0, AppOpKind::Write, RSZ, 4, Some(b"abcd".to_vec()), cb("w"))
            .unwrap();
        let ready = c.fail_entry(1);
        assert_eq!(ready.len(), 1);
        for (_, cb, outcome) in ready {
            cb(outcome);
        }
        assert_eq!(log.lock().unwrap().as_slice(), ["w:err"]);
        let out = c.issue(0, AppOpKind::Read, RSZ, 4, None, cb("r")).unwrap();
        assert_eq!(out.ready.len(), 1);
        let (_, cb2, outcome) = out.ready.into_iter().next().unwrap();
        assert_eq!(outcome.result, Err(ClientError::RegionFailed(1)));
        cb2(outcome);
    }

    #[test]
    fn deleted_cache_errors_stale() {
        let mut c = core(1, 1);
        let (_, cb) = recorder();
        c.mark_deleted();
        let out = c.issue(0, AppOpKind::Read, 0, 4, None, cb("r")).unwrap();
        assert_eq!(out.ready.len(), 1);
        assert!(matches!(
            out.ready[0].2.result,
            Err(ClientError::StaleCache(_))
        ));
    }
}
