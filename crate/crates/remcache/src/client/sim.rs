//! Simulated-backend cache runtime: wires `CacheCore` into the event world.
//! Covers the full client surface: create (with optional file prefill),
//! asynchronous reads/writes, reshape, delete, explicit region migration,
//! and reclamation handling with deadline enforcement on the virtual clock.

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;

use crate::client::core::{CacheCore, ReadyCallback, RoutedSub};
use crate::client::{
    AppOpKind, ClientError, MigrationOptimizations, OpCallback,
};
use crate::manager::{AllocationRequest, Manager, ManagerError};
use crate::clustersim::ClusterSim;
use crate::region::RegionTable;
use crate::sim::world::{ConnId, ConnOwner, SimWorld};
use crate::transport::netmodel::SimNanos;
use crate::transport::{
    BatchCompletion, OpKind, PostOutcome, Request, RespStatus,
};
use crate::types::{CacheDuration, CacheId, NetworkDistance, RegionId, Slo, VmId};

/// A step of an in-progress migration plan.
#[derive(Debug, Clone, Copy)]
pub struct MigrationStep {
    pub entry: usize,
    pub target_vm: VmId,
}

/// An active region-by-region migration.
pub struct MigrationPlan {
    pub remaining: VecDeque<MigrationStep>,
    pub current: Option<MigrationStep>,
    /// VMs to terminate and release once they host no more entries.
    pub retire_sources: Vec<VmId>,
    pub deadline: Option<SimNanos>,
}

/// Per-cache record of migration outcomes, for tests and reports.
#[derive(Debug, Default, Clone)]
pub struct MigrationReport {
    pub completed: Vec<(usize, SimNanos)>,
    /// Entries whose data was lost (source died before the copy finished).
    pub lost: Vec<usize>,
    pub finished_at: Option<SimNanos>,
    pub deadline_missed: bool,
}

/// One cache attached to the simulated world.
pub struct SimCacheRuntime {
    pub core: CacheCore,
    pub distance: NetworkDistance,
    /// Connection per (client thread, VM).
    conn_of: Vec<BTreeMap<VmId, ConnId>>,
    /// Pending routed requests per client thread, per connection.
    pending: Vec<BTreeMap<ConnId, VecDeque<Request>>>,
    /// Shape of posted batches for completion correlation.
    batch_meta: BTreeMap<(ConnId, u64), Vec<(u64, OpKind)>>,
    pub migration: Option<MigrationPlan>,
    pub report: MigrationReport,
    pub deleted: bool,
}

/// Completion signal for closed-loop drivers: one per retired operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CompletionNote {
    pub cache: usize,
    pub app_thread: usize,
}

impl SimCacheRuntime {
    fn conn(&self, client_thread: usize, vm: VmId) -> Option<ConnId> {
        self.conn_of[client_thread].get(&vm).copied()
    }

    fn record_lost(&mut self, entry: usize) {
        if !self.report.lost.contains(&entry) {
            self.report.lost.push(entry);
        }
    }
}

impl SimWorld {
    /// Installs the manager and cluster; required before creating caches.
    pub fn install_control_plane(&mut self, cluster: ClusterSim, manager: Manager) {
        self.cluster = Some(cluster);
        self.manager = Some(manager);
    }

    pub fn cache_id_of(&self, cache: usize) -> CacheId {
        self.caches[cache].core.cache_id
    }

    pub fn cache(&self, cache: usize) -> &SimCacheRuntime {
        &self.caches[cache]
    }

    pub fn cache_mut(&mut self, cache: usize) -> &mut SimCacheRuntime {
        &mut self.caches[cache]
    }

    /// Creates a cache: allocates VMs through the manager, spawns server
    /// agents, builds the region table, connects every client thread to
    /// every VM, and optionally prefills from a file prefix.
    pub fn create_cache(
        &mut self,
        capacity: u64,
        slo: Slo,
        duration: CacheDuration,
        app_threads: usize,
        opts: MigrationOptimizations,
        prefill: Option<&Path>,
    ) -> Result<usize, ClientError> {
        let now_s = self.clock as f64 / 1e9;
        let region_size = self
            .manager
            .as_ref()
            .expect("control plane installed")
            .region_size();
        let result = {
            let manager = self.manager.as_mut().unwrap();
            let cluster = self.cluster.as_mut().unwrap();
            manager
                .allocate(
                    cluster,
                    &AllocationRequest {
                        memory: capacity,
                        slo,
                        duration,
                    },
                    now_s,
                )
                .map_err(|e| match e {
                    ManagerError::SloUnsatisfiable => ClientError::SloUnsatisfiable,
                    ManagerError::CapacityUnavailable => ClientError::CapacityUnavailable,
                    other => ClientError::Other(other.to_string()),
                })?
        };
        // one server agent per VM
        for vm in &result.vms {
            self.add_server(vm.vm_id, vm.spec.memory, region_size, vm.server_threads);
        }
        let cache_idx = self.caches.len();
        // region table: VMs host consecutive runs of virtual regions
        let mut mapping: Vec<(VmId, RegionId)> = Vec::new();
        let mut conn_of = vec![BTreeMap::new(); result.config.client_threads as usize];
        for vm in &result.vms {
            let slot = self.server_slot_of_vm(vm.vm_id).unwrap();
            let mut tokens = Vec::new();
            for ct in 0..result.config.client_threads as usize {
                let (conn, t) = self
                    .connect(
                        slot,
                        result.cache_id,
                        vm.regions,
                        &result.config,
                        result.distance,
                        ConnOwner::Cache {
                            cache: cache_idx,
                            client_thread: ct,
                        },
                    )
                    .map_err(|e| ClientError::Other(e.to_string()))?;
                conn_of[ct].insert(vm.vm_id, conn);
                tokens = t;
            }
            mapping.extend(tokens.iter().map(|(rid, _)| (vm.vm_id, *rid)));
        }
        let table = RegionTable::new(region_size, capacity, mapping)
            .map_err(|e| ClientError::Other(e.to_string()))?;
        let core = CacheCore::new(result.cache_id, table, result.config, app_threads, opts);
        let ct_count = result.config.client_threads as usize;
        self.caches.push(SimCacheRuntime {
            core,
            distance: result.distance,
            conn_of,
            pending: vec![BTreeMap::new(); ct_count],
            batch_meta: BTreeMap::new(),
            migration: None,
            report: MigrationReport::default(),
            deleted: false,
        });
        if let Some(path) = prefill {
            self.prefill_from_file(cache_idx, path, capacity)?;
        }
        Ok(cache_idx)
    }

    fn prefill_from_file(
        &mut self,
        cache: usize,
        path: &Path,
        capacity: u64,
    ) -> Result<(), ClientError> {
        let bytes = std::fs::read(path).map_err(|e| ClientError::Other(e.to_string()))?;
        let take = bytes.len().min(capacity as usize);
        const CHUNK: usize = 4 << 20;
        let mut off = 0usize;
        while off < take {
            let end = (off + CHUNK).min(take);
            self.cache_write(
                cache,
                0,
                off as u64,
                bytes[off..end].to_vec(),
                Box::new(|_| {}),
            )?;
            off = end;
        }
        self.run_cache_quiescent(cache);
        Ok(())
    }

    /// Steps the world until the cache has no live operations.
    pub fn run_cache_quiescent(&mut self, cache: usize) {
        while self.caches[cache].core.live_ops() > 0 {
            if !self.step() {
                break;
            }
        }
    }

    /// Asynchronous read; the callback receives the bytes.
    pub fn cache_read(
        &mut self,
        cache: usize,
        app_thread: usize,
        addr: u64,
        len: u64,
        cb: OpCallback,
    ) -> Result<(), ClientError> {
        let out = self.caches[cache]
            .core
            .issue(app_thread, AppOpKind::Read, addr, len, None, cb)?;
        self.absorb_issue(cache, out.routed, out.ready);
        Ok(())
    }

    /// Asynchronous write of `payload` at `addr`.
    pub fn cache_write(
        &mut self,
        cache: usize,
        app_thread: usize,
        addr: u64,
        payload: Vec<u8>,
        cb: OpCallback,
    ) -> Result<(), ClientError> {
        let len = payload.len() as u64;
        let out = self.caches[cache].core.issue(
            app_thread,
            AppOpKind::Write,
            addr,
            len,
            Some(payload),
            cb,
        )?;
        self.absorb_issue(cache, out.routed, out.ready);
        Ok(())
    }

    fn absorb_issue(&mut self, cache: usize, routed: Vec<RoutedSub>, ready: Vec<ReadyCallback>) {
        self.deliver_ready(cache, ready);
        self.route_subs(cache, routed);
    }

    fn deliver_ready(&mut self, cache: usize, ready: Vec<ReadyCallback>) {
        for (app_thread, cb, outcome) in ready {
            cb(outcome);
            self.completion_notes.push(CompletionNote { cache, app_thread });
        }
    }

    fn route_subs(&mut self, cache: usize, routed: Vec<RoutedSub>) {
        if routed.is_empty() {
            return;
        }
        let mut touched: Vec<usize> = Vec::new();
        let mut failed_ready = Vec::new();
        {
            let rt = &mut self.caches[cache];
            for sub in routed {
                let conn = match rt.conn(sub.client_thread, sub.vm) {
                    Some(c) => c,
                    None => {
                        // no connection (VM died): fail the sub
                        failed_ready.extend(
                            rt.core.sub_result(sub.tag, Err(ClientError::TransportFailed)),
                        );
                        continue;
                    }
                };
                let req = match sub.kind {
                    AppOpKind::Read => Request::read(sub.region, sub.offset, sub.len, sub.tag),
                    AppOpKind::Write => {
                        Request::write(sub.region, sub.offset, sub.payload, sub.tag)
                    }
                };
                rt.pending[sub.client_thread]
                    .entry(conn)
                    .or_default()
                    .push_back(req);
                if !touched.contains(&sub.client_thread) {
                    touched.push(sub.client_thread);
                }
            }
        }
        self.deliver_ready(cache, failed_ready);
        for ct in touched {
            self.flush_client_thread(cache, ct);
        }
    }

    /// Posts pending requests: full batches eagerly, partial batches when a
    /// queue slot is free and nothing else is pending at this instant.
    fn flush_client_thread(&mut self, cache: usize, ct: usize) {
        loop {
            let mut selected: Option<(ConnId, Vec<Request>)> = None;
            {
                let rt = &mut self.caches[cache];
                let b = rt.core.config.batch_size as usize;
                for (&conn, queue) in rt.pending[ct].iter_mut() {
                    if queue.is_empty() {
                        continue;
                    }
                    if !self.conns[conn].qp.has_free_slot() || self.conns[conn].closed {
                        if self.conns[conn].closed {
                            // fail everything pending on a dead connection
                            let reqs: Vec<Request> = queue.drain(..).collect();
                            selected = Some((conn, reqs));
                            break;
                        }
                        continue;
                    }
                    let take = queue.len().min(b);
                    let reqs: Vec<Request> = queue.drain(..take).collect();
                    selected = Some((conn, reqs));
                    break;
                }
            }
            let (conn, reqs) = match selected {
                Some(s) => s,
                None => break,
            };
            let meta: Vec<(u64, OpKind)> =
                reqs.iter().map(|r| (r.completion_tag, r.op)).collect();
            match self.post_batch(conn, reqs) {
                Ok(PostOutcome::Accepted { batch_id }) => {
                    self.caches[cache].batch_meta.insert((conn, batch_id), meta);
                }
                Ok(PostOutcome::Backpressured) => {
                    unreachable!("slot availability checked before posting")
                }
                Err(_) => {
                    let mut ready = Vec::new();
                    for (tag, _) in meta {
                        ready.extend(
                            self.caches[cache]
                                .core
                                .sub_result(tag, Err(ClientError::TransportFailed)),
                        );
                    }
                    self.deliver_ready(cache, ready);
                }
            }
        }
    }

    /// Drains transport completions parked by `client_receive` into the
    /// owning cache runtimes. Called by the event loop after each event.
    pub(crate) fn drain_cache_inbox(&mut self) {
        while let Some((conn, completion)) = self.cache_inbox.pop() {
            let (cache, client_thread) = match self.conns[conn].owner {
                ConnOwner::Cache {
                    cache,
                    client_thread,
                } => (cache, client_thread),
                ConnOwner::Collector => continue,
            };
            let mut ready = Vec::new();
            {
                let rt = &mut self.caches[cache];
                match completion {
                    BatchCompletion::Done(rb) => {
                        let meta = rt
                            .batch_meta
                            .remove(&(conn, rb.batch_id))
                            .expect("posted batch has metadata");
                        debug_assert_eq!(meta.len(), rb.responses.len());
                        for ((tag, _), resp) in meta.into_iter().zip(rb.responses) {
                            let result = match resp.status {
                                RespStatus::Ok => Ok(resp.payload),
                                RespStatus::OutOfBounds => Err(ClientError::OutOfRange),
                                RespStatus::AccessDenied => Err(ClientError::TransportFailed),
                            };
                            ready.extend(rt.core.sub_result(tag, result));
                        }
                    }
                    BatchCompletion::Failed { batch_id } => {
                        if let Some(meta) = rt.batch_meta.remove(&(conn, batch_id)) {
                            for (tag, _) in meta {
                                ready.extend(
                                    rt.core.sub_result(tag, Err(ClientError::TransportFailed)),
                                );
                            }
                        }
                    }
                }
            }
            self.deliver_ready(cache, ready);
            self.flush_client_thread(cache, client_thread);
        }
    }

    /// Consumes completion notifications (for closed-loop drivers).
    pub fn take_completion_notes(&mut self) -> Vec<CompletionNote> {
        std::mem::take(&mut self.completion_notes)
    }

    // ---- delete -------------------------------------------------------

    /// Deletes a cache: in-flight operations complete or fail, then every
    /// VM is released. Later accesses observe a stale-cache error.
    pub fn delete_cache(&mut self, cache: usize) -> Result<(), ClientError> {
        if self.caches[cache].deleted {
            return Err(ClientError::StaleCache(self.caches[cache].core.cache_id));
        }
        self.caches[cache].core.mark_deleted();
        self.run_cache_quiescent(cache);
        let cache_id = self.caches[cache].core.cache_id;
        let vms: Vec<VmId> = {
            let manager = self.manager.as_ref().unwrap();
            manager
                .cache(cache_id)
                .map(|a| a.vms.iter().map(|v| v.vm_id).collect())
                .unwrap_or_default()
        };
        {
            let manager = self.manager.as_mut().unwrap();
            let cluster = self.cluster.as_mut().unwrap();
            manager
                .deallocate(cluster, cache_id)
                .map_err(|e| ClientError::Other(e.to_string()))?;
        }
        for vm in vms {
            if let Some(slot) = self.server_slot_of_vm(vm) {
                self.terminate_server(slot);
            }
        }
        self.caches[cache].deleted = true;
        self.log.push(self.clock, format!("delete cache={cache}"));
        Ok(())
    }

    // ---- reshape --------------------------------------------------------

    /// Changes a cache's capacity and/or SLO. With an unchanged SLO, growth
    /// uses the last VM's headroom before allocating more VMs and shrinking
    /// truncates; a changed SLO allocates a fresh set of VMs, migrates the
    /// surviving regions, and releases the old set. Any failure leaves the
    /// cache unchanged.
    pub fn reshape_cache(
        &mut self,
        cache: usize,
        new_capacity: u64,
        new_slo: Slo,
    ) -> Result<(), ClientError> {
        if self.caches[cache].deleted {
            return Err(ClientError::StaleCache(self.caches[cache].core.cache_id));
        }
        let cache_id = self.caches[cache].core.cache_id;
        let region_size = self.caches[cache].core.table.region_size();
        let old_slo = {
            let m = self.manager.as_ref().unwrap();
            m.cache(cache_id).ok_or(ClientError::StaleCache(cache_id))?.slo
        };
        if old_slo == new_slo {
            self.resize_same_slo(cache, new_capacity, region_size)
        } else {
            self.reshape_new_allocation(cache, new_capacity, new_slo)
        }
    }

    fn resize_same_slo(
        &mut self,
        cache: usize,
        new_capacity: u64,
        region_size: u64,
    ) -> Result<(), ClientError> {
        let cache_id = self.caches[cache].core.cache_id;
        let old_capacity = self.caches[cache].core.table.capacity();
        let old_regions = old_capacity.div_ceil(region_size) as i64;
        let new_regions = new_capacity.div_ceil(region_size).max(1) as i64;
        let delta = new_regions - old_regions;
        let now_s = self.clock as f64 / 1e9;
        if delta == 0 {
            // capacity change within the final region
            if new_capacity < old_capacity {
                self.caches[cache].core.table.truncate(new_capacity).ok();
            }
            return Ok(());
        }
        if delta > 0 {
            let outcome = {
                let manager = self.manager.as_mut().unwrap();
                let cluster = self.cluster.as_mut().unwrap();
                manager
                    .reallocate(cluster, cache_id, delta, now_s)
                    .map_err(|e| match e {
                        ManagerError::CapacityUnavailable => ClientError::CapacityUnavailable,
                        other => ClientError::Other(other.to_string()),
                    })?
            };
            let config = self.caches[cache].core.config;
            let distance = self.caches[cache].distance;
            let mut extra: Vec<(VmId, RegionId)> = Vec::new();
            // headroom regions on the last existing VM
            if outcome.grown_on_last > 0 {
                let last_vm = {
                    let m = self.manager.as_ref().unwrap();
                    let alloc = m.cache(cache_id).unwrap();
                    // the VM that grew is the last one before any additions
                    alloc.vms[alloc.vms.len() - outcome.added.len() - 1].vm_id
                };
                let slot = self.server_slot_of_vm(last_vm).unwrap();
                let have = self.servers[slot].core.regions_of(cache_id).len() as u32;
                let tokens = self.servers[slot]
                    .core
                    .handle_connect(cache_id, have + outcome.grown_on_last)
                    .map_err(|e| ClientError::Other(e.to_string()))?;
                let new_tokens = &tokens[have as usize..];
                for ct in 0..config.client_threads as usize {
                    if let Some(&conn) = self.caches[cache].conn_of[ct].get(&last_vm) {
                        for (rid, tok) in new_tokens {
                            self.conns[conn].tokens.insert(*rid, *tok);
                        }
                    }
                }
                extra.extend(new_tokens.iter().map(|(rid, _)| (last_vm, *rid)));
            }
            for vm in &outcome.added {
                self.add_server(vm.vm_id, vm.spec.memory, region_size, vm.server_threads);
                let slot = self.server_slot_of_vm(vm.vm_id).unwrap();
                let mut tokens = Vec::new();
                for ct in 0..config.client_threads as usize {
                    let (conn, t) = self
                        .connect(
                            slot,
                            cache_id,
                            vm.regions,
                            &config,
                            distance,
                            ConnOwner::Cache {
                                cache,
                                client_thread: ct,
                            },
                        )
                        .map_err(|e| ClientError::Other(e.to_string()))?;
                    self.caches[cache].conn_of[ct].insert(vm.vm_id, conn);
                    tokens = t;
                }
                extra.extend(tokens.iter().map(|(rid, _)| (vm.vm_id, *rid)));
            }
            self.caches[cache]
                .core
                .table
                .extend(new_capacity, extra)
                .map_err(|e| ClientError::Other(e.to_string()))?;
            Ok(())
        } else {
            // shrink: truncate first, then release regions and empty VMs
            let removed = self.caches[cache]
                .core
                .table
                .truncate(new_capacity)
                .map_err(|e| ClientError::Other(e.to_string()))?;
            let mut by_vm: BTreeMap<VmId, Vec<RegionId>> = BTreeMap::new();
            for e in removed {
                by_vm.entry(e.vm_id).or_default().push(e.physical_region_id);
            }
            for (vm, regions) in &by_vm {
                if let Some(slot) = self.server_slot_of_vm(*vm) {
                    self.servers[slot].core.release_regions(cache_id, regions);
                }
            }
            let released = {
                let manager = self.manager.as_mut().unwrap();
                let cluster = self.cluster.as_mut().unwrap();
                manager
                    .reallocate(cluster, cache_id, delta, now_s)
                    .map_err(|e| ClientError::Other(e.to_string()))?
                    .released
            };
            for vm in released {
                if let Some(slot) = self.server_slot_of_vm(vm) {
                    self.terminate_server(slot);
                }
            }
            Ok(())
        }
    }

    fn reshape_new_allocation(
        &mut self,
        cache: usize,
        new_capacity: u64,
        new_slo: Slo,
    ) -> Result<(), ClientError> {
        let old_cache_id = self.caches[cache].core.cache_id;
        let duration = {
            let m = self.manager.as_ref().unwrap();
            m.cache(old_cache_id).unwrap().duration
        };
        let now_s = self.clock as f64 / 1e9;
        let region_size = self.manager.as_ref().unwrap().region_size();
        let result = {
            let manager = self.manager.as_mut().unwrap();
            let cluster = self.cluster.as_mut().unwrap();
            manager
                .allocate(
                    cluster,
                    &AllocationRequest {
                        memory: new_capacity,
                        slo: new_slo,
                        duration,
                    },
                    now_s,
                )
                .map_err(|e| match e {
                    ManagerError::SloUnsatisfiable => ClientError::SloUnsatisfiable,
                    ManagerError::CapacityUnavailable => ClientError::CapacityUnavailable,
                    other => ClientError::Other(other.to_string()),
                })?
        };
        // the old cache shrinks first if needed, so only surviving regions move
        let old_capacity = self.caches[cache].core.table.capacity();
        if new_capacity < old_capacity {
            self.caches[cache].core.table.truncate(new_capacity).ok();
        }
        // spawn the new allocation's agents and connect with the new config
        for vm in &result.vms {
            self.add_server(vm.vm_id, vm.spec.memory, region_size, vm.server_threads);
        }
        let mut conn_of = vec![BTreeMap::new(); result.config.client_threads as usize];
        let mut new_mapping: Vec<(VmId, RegionId)> = Vec::new();
        for vm in &result.vms {
            let slot = self.server_slot_of_vm(vm.vm_id).unwrap();
            let mut tokens = Vec::new();
            for (ct, conns) in conn_of.iter_mut().enumerate() {
                let (conn, t) = self
                    .connect(
                        slot,
                        result.cache_id,
                        vm.regions,
                        &result.config,
                        result.distance,
                        ConnOwner::Cache {
                            cache,
                            client_thread: ct,
                        },
                    )
                    .map_err(|e| ClientError::Other(e.to_string()))?;
                conns.insert(vm.vm_id, conn);
                tokens = t;
            }
            new_mapping.extend(tokens.iter().map(|(rid, _)| (vm.vm_id, *rid)));
        }
        // copy surviving regions old -> new on the virtual clock
        let survive = self.caches[cache].core.table.entries().len();
        for entry in 0..survive {
            let (old_vm, old_region) = {
                let e = self.caches[cache].core.table.entry(entry).unwrap();
                (e.vm_id, e.physical_region_id)
            };
            let old_slot = self.server_slot_of_vm(old_vm).unwrap();
            let (new_vm, new_region) = new_mapping[entry];
            let new_slot = self.server_slot_of_vm(new_vm).unwrap();
            let done = std::sync::Arc::new(std::sync::atomic::AtomicBool::new(false));
            let done2 = std::sync::Arc::clone(&done);
            self.start_region_copy(
                (old_slot, old_region),
                (new_slot, new_region),
                Box::new(move |_, ok| {
                    assert!(ok, "reshape copy sources stay alive");
                    done2.store(true, std::sync::atomic::Ordering::SeqCst);
                }),
            );
            while !done.load(std::sync::atomic::Ordering::SeqCst) && self.step() {}
        }
        // swap in the new identity, table, config, and connections
        let old_vms: Vec<VmId> = {
            let m = self.manager.as_ref().unwrap();
            m.cache(old_cache_id)
                .map(|a| a.vms.iter().map(|v| v.vm_id).collect())
                .unwrap_or_default()
        };
        {
            let manager = self.manager.as_mut().unwrap();
            let cluster = self.cluster.as_mut().unwrap();
            manager.deallocate(cluster, old_cache_id).ok();
        }
        for vm in old_vms {
            if let Some(slot) = self.server_slot_of_vm(vm) {
                self.terminate_server(slot);
            }
        }
        let app_threads = self.caches[cache].core.app_threads();
        let opts = self.caches[cache].core.opts;
        let table = RegionTable::new(region_size, new_capacity, new_mapping)
            .map_err(|e| ClientError::Other(e.to_string()))?;
        let rt = &mut self.caches[cache];
        rt.core = CacheCore::new(result.cache_id, table, result.config, app_threads, opts);
        rt.distance = result.distance;
        rt.conn_of = conn_of;
        rt.pending = vec![BTreeMap::new(); result.config.client_threads as usize];
        rt.batch_meta.clear();
        Ok(())
    }

    // ---- migration -------------------------------------------------------

    /// Allocates a replacement VM (same type, same distance) as a migration
    /// target, spawns its agent, and connects every client thread.
    pub fn add_migration_target(&mut self, cache: usize) -> Result<VmId, ClientError> {
        let cache_id = self.caches[cache].core.cache_id;
        let now_s = self.clock as f64 / 1e9;
        let region_size = self.manager.as_ref().unwrap().region_size();
        let vm = {
            let manager = self.manager.as_mut().unwrap();
            let cluster = self.cluster.as_mut().unwrap();
            manager
                .allocate_replacement(cluster, cache_id, now_s)
                .map_err(|e| match e {
                    ManagerError::Cluster(_) => ClientError::CapacityUnavailable,
                    other => ClientError::Other(other.to_string()),
                })?
        };
        self.add_server(vm.vm_id, vm.spec.memory, region_size, vm.server_threads.max(1));
        let slot = self.server_slot_of_vm(vm.vm_id).unwrap();
        let config = self.caches[cache].core.config;
        let distance = self.caches[cache].distance;
        for ct in 0..config.client_threads as usize {
            // attach without pre-allocating regions; tokens arrive per entry
            let conn = self
                .attach_conn(
                    slot,
                    &config,
                    distance,
                    ConnOwner::Cache {
                        cache,
                        client_thread: ct,
                    },
                )
                .map_err(|e| ClientError::Other(e.to_string()))?;
            self.caches[cache].conn_of[ct].insert(vm.vm_id, conn);
        }
        Ok(vm.vm_id)
    }

    /// Starts migrating the given entries, one at a time, onto target VMs
    /// (round-robin when several are given). Traffic keeps flowing: reads
    /// stay on the old VM and writes to the migrating region queue.
    pub fn migrate_cache_regions(
        &mut self,
        cache: usize,
        entries: &[usize],
        targets: &[VmId],
        retire_sources: bool,
    ) -> Result<(), ClientError> {
        assert!(!targets.is_empty(), "need at least one target VM");
        if self.caches[cache].migration.is_some() {
            return Err(ClientError::Other("migration already active".into()));
        }
        let mut sources: Vec<VmId> = Vec::new();
        let steps: VecDeque<MigrationStep> = entries
            .iter()
            .enumerate()
            .map(|(i, &entry)| {
                let vm = self.caches[cache].core.table.entry(entry).unwrap().vm_id;
                if !sources.contains(&vm) {
                    sources.push(vm);
                }
                MigrationStep {
                    entry,
                    target_vm: targets[i % targets.len()],
                }
            })
            .collect();
        self.caches[cache].migration = Some(MigrationPlan {
            remaining: steps,
            current: None,
            retire_sources: if retire_sources { sources } else { Vec::new() },
            deadline: None,
        });
        self.migration_step(cache);
        Ok(())
    }

    /// Advances the migration plan: starts the next region copy or
    /// finalizes the plan.
    fn migration_step(&mut self, cache: usize) {
        let step = {
            let rt = &mut self.caches[cache];
            let plan = match rt.migration.as_mut() {
                Some(p) => p,
                None => return,
            };
            match plan.remaining.pop_front() {
                Some(s) => {
                    plan.current = Some(s);
                    s
                }
                None => {
                    plan.current = None;
                    return self.finish_migration_plan(cache);
                }
            }
        };
        let cache_id = self.caches[cache].core.cache_id;
        let (old_vm, old_region) = {
            let e = self.caches[cache].core.table.entry(step.entry).unwrap();
            (e.vm_id, e.physical_region_id)
        };
        let old_slot = match self.server_slot_of_vm(old_vm) {
            Some(s) if !self.conns_dead_to(old_vm) => s,
            _ => {
                // source already gone: data for this entry is lost
                let ready = self.caches[cache].core.fail_entry(step.entry);
                self.caches[cache].record_lost(step.entry);
                self.deliver_ready(cache, ready);
                return self.migration_step(cache);
            }
        };
        let target_slot = self.server_slot_of_vm(step.target_vm).expect("target exists");
        // allocate the destination region and spread its token to every
        // client thread's connection
        let have = self.servers[target_slot].core.regions_of(cache_id).len() as u32;
        let tokens = match self.servers[target_slot]
            .core
            .handle_connect(cache_id, have + 1)
        {
            Ok(t) => t,
            Err(_) => {
                let ready = self.caches[cache].core.fail_entry(step.entry);
                self.caches[cache].record_lost(step.entry);
                self.deliver_ready(cache, ready);
                return self.migration_step(cache);
            }
        };
        let (new_region, new_token) = *tokens.last().unwrap();
        for ct in 0..self.caches[cache].core.config.client_threads as usize {
            if let Some(&conn) = self.caches[cache].conn_of[ct].get(&step.target_vm) {
                self.conns[conn].tokens.insert(new_region, new_token);
            }
        }
        self.caches[cache].core.begin_entry_migration(step.entry);
        self.log.push(
            self.clock,
            format!("migrate cache={cache} entry={} to={}", step.entry, step.target_vm),
        );
        self.start_region_copy(
            (old_slot, old_region),
            (target_slot, new_region),
            Box::new(move |w, ok| w.migration_cut(cache, step, new_region, ok)),
        );
    }

    fn conns_dead_to(&self, vm: VmId) -> bool {
        match self.server_slot_of_vm(vm) {
            Some(slot) => {
                self.servers[slot].core.mode == crate::server::ServerMode::Terminated
            }
            None => true,
        }
    }

    fn migration_cut(&mut self, cache: usize, step: MigrationStep, new_region: RegionId, ok: bool) {
        if ok {
            let cache_id = self.caches[cache].core.cache_id;
            let old_vm = self.caches[cache].core.table.entry(step.entry).unwrap().vm_id;
            let drained = {
                let rt = &mut self.caches[cache];
                rt.report.completed.push((step.entry, self.clock));
                rt.core
                    .complete_entry_migration(step.entry, step.target_vm, new_region)
            };
            self.manager
                .as_mut()
                .unwrap()
                .record_migration(cache_id, old_vm, step.target_vm, 1);
            self.route_subs(cache, drained);
        } else {
            // the source (or target) died mid-copy: the entry's bytes are
            // gone unless the old mapping still exists
            let source_alive = {
                let e = self.caches[cache].core.table.entry(step.entry).unwrap();
                !self.conns_dead_to(e.vm_id)
            };
            if source_alive {
                let drained = self.caches[cache].core.abort_entry_migration(step.entry);
                if let Some(p) = self.caches[cache].migration.as_mut() {
                    p.remaining.push_back(step);
                }
                self.route_subs(cache, drained);
            } else {
                let ready = self.caches[cache].core.fail_entry(step.entry);
                self.caches[cache].record_lost(step.entry);
                self.deliver_ready(cache, ready);
            }
        }
        self.migration_step(cache);
    }

    fn finish_migration_plan(&mut self, cache: usize) {
        let (retire, deadline) = {
            let rt = &mut self.caches[cache];
            let plan = rt.migration.take().expect("plan active");
            rt.report.finished_at = Some(self.clock);
            if let Some(d) = plan.deadline {
                if self.clock > d || !plan.remaining.is_empty() {
                    rt.report.deadline_missed = true;
                }
            }
            (plan.retire_sources, plan.deadline)
        };
        let _ = deadline;
        let cache_id = self.caches[cache].core.cache_id;
        for vm in retire {
            // terminate only when no entry still lives there
            let still_used = self.caches[cache]
                .core
                .table
                .entries()
                .iter()
                .any(|e| e.vm_id == vm);
            if !still_used {
                if let Some(slot) = self.server_slot_of_vm(vm) {
                    self.terminate_server(slot);
                }
                if let Some(cluster) = self.cluster.as_mut() {
                    cluster.release_vm(vm);
                }
                if let Some(manager) = self.manager.as_mut() {
                    manager.forget_vm(cache_id, vm);
                }
                self.log.push(self.clock, format!("retire vm={vm}"));
            }
        }
        self.log.push(self.clock, format!("migration-plan-done cache={cache}"));
    }

    // ---- reclamation ------------------------------------------------------

    /// A spot VM got its reclamation warning: start migrating every affected
    /// entry to a replacement VM; the cluster force-terminates the VM when
    /// the warning elapses, and any entry still unmigrated then is lost.
    pub fn reclaim_spot_vm(&mut self, vm: VmId, warning_s: f64) -> Result<(), ClientError> {
        let now_s = self.clock as f64 / 1e9;
        let terminate_at = {
            let cluster = self.cluster.as_mut().unwrap();
            cluster
                .reclaim_spot(vm, warning_s, now_s)
                .map_err(|e| ClientError::Other(e.to_string()))?
        };
        let deadline_ns = (terminate_at * 1e9) as SimNanos;
        self.log.push(
            self.clock,
            format!("reclaim-warning vm={vm} deadline_s={terminate_at}"),
        );
        self.schedule_at(
            deadline_ns,
            Box::new(move |w| w.force_terminate_vm(vm)),
        );
        self.handle_reclamation_warning(vm, deadline_ns)
    }

    /// Immediate VM failure: zero warning; affected regions lose their data
    /// and are re-created empty on a replacement VM when one is available.
    pub fn fail_vm(&mut self, vm: VmId) {
        self.log.push(self.clock, format!("vm-failure vm={vm}"));
        {
            let cluster = self.cluster.as_mut().unwrap();
            if !cluster.fail_vm(vm) {
                return;
            }
        }
        if let Some(slot) = self.server_slot_of_vm(vm) {
            self.terminate_server(slot);
        }
        let owner = self.manager.as_ref().unwrap().owner_of_vm(vm);
        let (cache, cache_id) = match owner.and_then(|id| {
            self.caches
                .iter()
                .position(|c| c.core.cache_id == id)
                .map(|i| (i, id))
        }) {
            Some(x) => x,
            None => return,
        };
        let affected = self.caches[cache].core.table.entries_on_vm(vm);
        if affected.is_empty() {
            return;
        }
        // contents are gone; re-create the regions empty on a replacement
        match self.add_migration_target(cache) {
            Ok(new_vm) => {
                let target_slot = self.server_slot_of_vm(new_vm).unwrap();
                for &entry in &affected {
                    let have =
                        self.servers[target_slot].core.regions_of(cache_id).len() as u32;
                    if let Ok(tokens) = self.servers[target_slot]
                        .core
                        .handle_connect(cache_id, have + 1)
                    {
                        let (new_region, new_token) = *tokens.last().unwrap();
                        for ct in 0..self.caches[cache].core.config.client_threads as usize {
                            if let Some(&conn) = self.caches[cache].conn_of[ct].get(&new_vm) {
                                self.conns[conn].tokens.insert(new_region, new_token);
                            }
                        }
                        self.caches[cache]
                            .core
                            .table
                            .remap(entry, new_vm, new_region)
                            .ok();
                        self.caches[cache].record_lost(entry);
                    }
                }
                self.manager.as_mut().unwrap().forget_vm(cache_id, vm);
            }
            Err(_) => {
                let mut ready = Vec::new();
                for &entry in &affected {
                    ready.extend(self.caches[cache].core.fail_entry(entry));
                    self.caches[cache].record_lost(entry);
                }
                self.deliver_ready(cache, ready);
            }
        }
    }

    fn handle_reclamation_warning(
        &mut self,
        vm: VmId,
        deadline_ns: SimNanos,
    ) -> Result<(), ClientError> {
        let owner = self.manager.as_ref().unwrap().owner_of_vm(vm);
        let cache = match owner.and_then(|id| {
            self.caches.iter().position(|c| c.core.cache_id == id)
        }) {
            Some(c) => c,
            None => return Ok(()), // VM hosts no cache: nothing to do
        };
        let affected = self.caches[cache].core.table.entries_on_vm(vm);
        if affected.is_empty() {
            return Ok(());
        }
        let target = self.add_migration_target(cache)?;
        if self.caches[cache].migration.is_some() {
            return Err(ClientError::Other("migration already active".into()));
        }
        let steps: VecDeque<MigrationStep> = affected
            .iter()
            .map(|&entry| MigrationStep {
                entry,
                target_vm: target,
            })
            .collect();
        self.caches[cache].migration = Some(MigrationPlan {
            remaining: steps,
            current: None,
            retire_sources: vec![vm],
            deadline: Some(deadline_ns),
        });
        self.migration_step(cache);
        Ok(())
    }

    /// The reclamation deadline arrived: the VM is gone. Any entry still
    /// mapped to it loses its data.
    fn force_terminate_vm(&mut self, vm: VmId) {
        let slot = match self.server_slot_of_vm(vm) {
            Some(s) => s,
            None => return,
        };
        if self.servers[slot].core.mode == crate::server::ServerMode::Terminated {
            // already retired by a completed migration
            if let Some(cluster) = self.cluster.as_mut() {
                cluster.release_vm(vm);
            }
            return;
        }
        self.terminate_server(slot);
        if let Some(cluster) = self.cluster.as_mut() {
            cluster.release_vm(vm);
        }
        self.log.push(self.clock, format!("force-terminate vm={vm}"));
        for cache in 0..self.caches.len() {
            let affected = self.caches[cache].core.table.entries_on_vm(vm);
            if affected.is_empty() {
                continue;
            }
            let mut ready = Vec::new();
            for entry in affected {
                ready.extend(self.caches[cache].core.fail_entry(entry));
                self.caches[cache].record_lost(entry);
                self.caches[cache].report.deadline_missed = true;
            }
            self.deliver_ready(cache, ready);
        }
    }
}

