//! The global cache manager: translates capacity/SLO/duration requests into
//! VM allocations and transfer configurations, revises them on reshape, and
//! relays reclamation alerts to the owning cache client.

pub mod rpc;

use std::collections::BTreeMap;

use thiserror::Error;

use crate::clustersim::{ClusterError, ClusterSim};
use crate::perfmodel::{search, BuildOptions, PerfModel, PerfOracle};
use crate::types::{
    CacheDuration, CacheId, NetworkDistance, RdmaConfig, SearchSpaceBounds, Slo, VmId, VmKind,
    VmSpec,
};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ManagerError {
    #[error("no configuration satisfies the SLO at any distance")]
    SloUnsatisfiable,
    #[error("no VM set can host the allocation")]
    CapacityUnavailable,
    #[error("unknown cache {0}")]
    UnknownCache(CacheId),
    #[error("cluster: {0}")]
    Cluster(ClusterError),
}

/// What the manager asks for on behalf of a cache.
#[derive(Debug, Clone)]
pub struct AllocationRequest {
    pub memory: u64,
    pub slo: Slo,
    pub duration: CacheDuration,
}

/// One VM of an allocation: identity, its spec, and how many of the cache's
/// regions it hosts.
#[derive(Debug, Clone)]
pub struct AllocatedCacheVm {
    pub vm_id: VmId,
    pub spec: VmSpec,
    pub regions: u32,
    /// Worker threads the cache server agent runs on this VM.
    pub server_threads: u32,
}

/// The manager's answer to Allocate.
#[derive(Debug, Clone)]
pub struct AllocationResult {
    pub cache_id: CacheId,
    pub vms: Vec<AllocatedCacheVm>,
    pub config: RdmaConfig,
    pub distance: NetworkDistance,
}

/// Per-cache allocation record.
#[derive(Debug, Clone)]
pub struct CacheAllocation {
    pub cache_id: CacheId,
    pub slo: Slo,
    pub duration: CacheDuration,
    pub config: RdmaConfig,
    pub distance: NetworkDistance,
    pub vm_type: VmSpec,
    pub vms: Vec<AllocatedCacheVm>,
    /// Region capacity one VM of this type can host for this cache.
    pub regions_per_vm: u32,
}

impl CacheAllocation {
    pub fn total_regions(&self) -> u64 {
        self.vms.iter().map(|v| v.regions as u64).sum()
    }
}

/// Search-space bounds used when building models.
#[derive(Debug, Clone, Copy)]
pub struct ModelSettings {
    pub c_max: u32,
    pub q_min: u32,
    pub q_max: u32,
    pub build: BuildOptions,
}

impl Default for ModelSettings {
    fn default() -> Self {
        ModelSettings {
            c_max: 8,
            // the calibrated fully-loaded queue-pair optimum; see the
            // modeling chapter for how it is measured
            q_min: 4,
            q_max: 16,
            build: BuildOptions::default(),
        }
    }
}

pub struct Manager {
    region_size: u64,
    settings: ModelSettings,
    oracle: Box<dyn PerfOracle>,
    models: BTreeMap<(u64, NetworkDistance), PerfModel>,
    caches: BTreeMap<CacheId, CacheAllocation>,
    next_cache: u64,
}

/// Record sizes are quantized to powers of two between 4 B and 16 KiB; an
/// SLO's record size rounds up to the next modeled size.
pub fn quantize_record_size(record_size: u64) -> u64 {
    record_size.clamp(4, 16384).next_power_of_two()
}

impl Manager {
    pub fn new(region_size: u64, settings: ModelSettings, oracle: Box<dyn PerfOracle>) -> Self {
        Manager {
            region_size,
            settings,
            oracle,
            models: BTreeMap::new(),
            caches: BTreeMap::new(),
            next_cache: 1,
        }
    }

    pub fn region_size(&self) -> u64 {
        self.region_size
    }

    pub fn cache(&self, id: CacheId) -> Option<&CacheAllocation> {
        self.caches.get(&id)
    }

    /// Lazily builds (and caches) the model for a record size and distance.
    pub fn model_for(&mut self, record_size: u64, distance: NetworkDistance) -> &PerfModel {
        let rec = quantize_record_size(record_size);
        let key = (rec, distance);
        if !self.models.contains_key(&key) {
            let bounds = SearchSpaceBounds::new(
                self.settings.c_max,
                rec,
                self.settings.q_min,
                self.settings.q_max,
            )
            .expect("valid model bounds");
            let model = PerfModel::build(bounds, &mut *self.oracle, rec, distance, self.settings.build);
            self.models.insert(key, model);
        }
        &self.models[&key]
    }

    /// Installs a prebuilt model (e.g. loaded from a file).
    pub fn install_model(&mut self, record_size: u64, distance: NetworkDistance, model: PerfModel) {
        self.models.insert((quantize_record_size(record_size), distance), model);
    }

    /// Cheapest single-type VM set hosting `regions` regions for a
    /// configuration: how many VMs, given the per-VM region capacity.
    fn plan_vm_set(
        spec: &VmSpec,
        config: &RdmaConfig,
        regions: u64,
        region_size: u64,
    ) -> Option<(u32 /* per vm */, u64 /* vm count */, f64 /* cost */)> {
        let by_memory = spec.region_capacity(region_size);
        if by_memory == 0 {
            return None;
        }
        let s = config.server_threads as u64;
        let by_cores = if s == 0 {
            u64::MAX
        } else {
            // a VM hosting r of R regions needs ceil(s*r/R) cores
            spec.cores as u64 * regions / s
        };
        let per_vm = by_memory.min(by_cores);
        if per_vm == 0 {
            return None;
        }
        let count = regions.div_ceil(per_vm);
        Some((per_vm as u32, count, count as f64 * spec.price_per_hour))
    }

    /// How many VMs of `spec` the cluster can host at a distance right now.
    fn cluster_fits(cluster: &ClusterSim, spec: &VmSpec, distance: NetworkDistance, need: u64) -> bool {
        let mut remaining = need;
        for server in cluster.servers.iter().filter(|s| s.distance == distance) {
            if server.stranded_until.is_some() && spec.cores > 0 {
                continue;
            }
            let by_mem = server.free_memory / spec.memory.max(1);
            let by_cores = if spec.cores == 0 {
                u64::MAX
            } else {
                (server.free_cores / spec.cores) as u64
            };
            remaining = remaining.saturating_sub(by_mem.min(by_cores));
            if remaining == 0 {
                return true;
            }
        }
        remaining == 0
    }

    /// Services Allocate: finds, for each network distance with a
    /// configuration satisfying the SLO, the cheapest feasible VM set, then
    /// allocates the globally cheapest. Failure leaves the cluster
    /// accounting unchanged.
    pub fn allocate(
        &mut self,
        cluster: &mut ClusterSim,
        req: &AllocationRequest,
        now_s: f64,
    ) -> Result<AllocationResult, ManagerError> {
        let regions = req.memory.div_ceil(self.region_size).max(1);
        let mut any_config = false;
        let mut candidates: Vec<(f64, u32, NetworkDistance, RdmaConfig, VmSpec, u32, u64)> =
            Vec::new();
        for distance in NetworkDistance::ALL {
            let config = {
                let model = self.model_for(req.slo.record_size, distance);
                match search(model, &req.slo).config {
                    Some(c) => c,
                    None => continue,
                }
            };
            any_config = true;
            for spec in &cluster.vm_menu {
                if req.duration == CacheDuration::Infinite && spec.kind == VmKind::Spot {
                    continue;
                }
                if let Some((per_vm, count, cost)) =
                    Self::plan_vm_set(spec, &config, regions, self.region_size)
                {
                    if Self::cluster_fits(cluster, spec, distance, count) {
                        candidates.push((
                            cost,
                            distance.switches(),
                            distance,
                            config,
                            spec.clone(),
                            per_vm,
                            count,
                        ));
                    }
                }
            }
        }
        if !any_config {
            return Err(ManagerError::SloUnsatisfiable);
        }
        candidates.sort_by(|a, b| {
            a.0.partial_cmp(&b.0)
                .unwrap()
                .then(a.1.cmp(&b.1))
                .then(a.4.vm_type.cmp(&b.4.vm_type))
        });
        let (_, _, distance, config, spec, per_vm, count) =
            candidates.into_iter().next().ok_or(ManagerError::CapacityUnavailable)?;

        // allocate atomically: roll back on any failure
        let mut vm_ids = Vec::new();
        for _ in 0..count {
            match cluster.allocate_vm(&spec, distance, now_s) {
                Ok(id) => vm_ids.push(id),
                Err(_) => {
                    for id in vm_ids {
                        cluster.release_vm(id);
                    }
                    return Err(ManagerError::CapacityUnavailable);
                }
            }
        }
        let cache_id = CacheId(self.next_cache);
        self.next_cache += 1;
        let mut left = regions;
        let vms: Vec<AllocatedCacheVm> = vm_ids
            .iter()
            .map(|&vm_id| {
                let r = left.min(per_vm as u64) as u32;
                left -= r as u64;
                AllocatedCacheVm {
                    vm_id,
                    spec: spec.clone(),
                    regions: r,
                    server_threads: server_threads_for(&config, r as u64, regions),
                }
            })
            .collect();
        let allocation = CacheAllocation {
            cache_id,
            slo: req.slo,
            duration: req.duration,
            config,
            distance,
            vm_type: spec,
            vms: vms.clone(),
            regions_per_vm: per_vm,
        };
        self.caches.insert(cache_id, allocation);
        Ok(AllocationResult {
            cache_id,
            vms,
            config,
            distance,
        })
    }

    /// Grows or shrinks a cache's region count, keeping the VM type, batch
    /// size, and queue depth of the existing allocation. Growth first uses
    /// headroom on the last VM, then allocates more VMs of the same type.
    /// Returns the VMs added (grow) or released (shrink).
    pub fn reallocate(
        &mut self,
        cluster: &mut ClusterSim,
        cache_id: CacheId,
        delta_regions: i64,
        now_s: f64,
    ) -> Result<ReallocOutcome, ManagerError> {
        let alloc = self
            .caches
            .get_mut(&cache_id)
            .ok_or(ManagerError::UnknownCache(cache_id))?;
        if delta_regions == 0 {
            return Ok(ReallocOutcome::default());
        }
        if delta_regions > 0 {
            let total_after = alloc.total_regions() + delta_regions as u64;
            let mut need = delta_regions as u64;
            let mut out = ReallocOutcome::default();
            // headroom on the last VM first
            if let Some(last) = alloc.vms.last_mut() {
                let headroom = (alloc.regions_per_vm - last.regions) as u64;
                let take = headroom.min(need);
                last.regions += take as u32;
                need -= take;
                if take > 0 {
                    out.grown_on_last = take as u32;
                }
            }
            let mut new_ids = Vec::new();
            while need > 0 {
                match cluster.allocate_vm(&alloc.vm_type, alloc.distance, now_s) {
                    Ok(id) => {
                        let r = need.min(alloc.regions_per_vm as u64) as u32;
                        need -= r as u64;
                        new_ids.push(AllocatedCacheVm {
                            vm_id: id,
                            spec: alloc.vm_type.clone(),
                            regions: r,
                            server_threads: 0, // fixed up below
                        });
                    }
                    Err(_) => {
                        for vm in &new_ids {
                            cluster.release_vm(vm.vm_id);
                        }
                        if let Some(last) = alloc.vms.last_mut() {
                            last.regions -= out.grown_on_last;
                        }
                        return Err(ManagerError::CapacityUnavailable);
                    }
                }
            }
            alloc.vms.extend(new_ids.iter().cloned());
            for vm in alloc.vms.iter_mut() {
                vm.server_threads =
                    server_threads_for(&alloc.config, vm.regions as u64, total_after);
            }
            out.added = new_ids;
            Ok(out)
        } else {
            let mut need = (-delta_regions) as u64;
            let mut out = ReallocOutcome::default();
            while need > 0 {
                let last = alloc.vms.last_mut().ok_or(ManagerError::CapacityUnavailable)?;
                let take = (last.regions as u64).min(need);
                last.regions -= take as u32;
                need -= take;
                if last.regions == 0 {
                    let vm = alloc.vms.pop().unwrap();
                    cluster.release_vm(vm.vm_id);
                    out.released.push(vm.vm_id);
                }
            }
            Ok(out)
        }
    }

    /// Releases every VM of a cache.
    pub fn deallocate(
        &mut self,
        cluster: &mut ClusterSim,
        cache_id: CacheId,
    ) -> Result<(), ManagerError> {
        let alloc = self
            .caches
            .remove(&cache_id)
            .ok_or(ManagerError::UnknownCache(cache_id))?;
        for vm in &alloc.vms {
            cluster.release_vm(vm.vm_id);
        }
        Ok(())
    }

    /// Allocates one replacement VM of the same type as a cache's existing
    /// VMs (migration target), on any server with room at the same distance.
    pub fn allocate_replacement(
        &mut self,
        cluster: &mut ClusterSim,
        cache_id: CacheId,
        now_s: f64,
    ) -> Result<AllocatedCacheVm, ManagerError> {
        let alloc = self
            .caches
            .get_mut(&cache_id)
            .ok_or(ManagerError::UnknownCache(cache_id))?;
        let id = cluster
            .allocate_vm(&alloc.vm_type, alloc.distance, now_s)
            .map_err(ManagerError::Cluster)?;
        let vm = AllocatedCacheVm {
            vm_id: id,
            spec: alloc.vm_type.clone(),
            regions: 0,
            server_threads: 0,
        };
        alloc.vms.push(vm.clone());
        Ok(vm)
    }

    /// Records that a VM left a cache (after migration away from it).
    pub fn forget_vm(&mut self, cache_id: CacheId, vm_id: VmId) {
        if let Some(alloc) = self.caches.get_mut(&cache_id) {
            alloc.vms.retain(|v| v.vm_id != vm_id);
        }
    }

    /// Moves region ownership counts between VMs of a cache after a
    /// migration cutover.
    pub fn record_migration(&mut self, cache_id: CacheId, from: VmId, to: VmId, regions: u32) {
        if let Some(alloc) = self.caches.get_mut(&cache_id) {
            for vm in alloc.vms.iter_mut() {
                if vm.vm_id == from {
                    vm.regions = vm.regions.saturating_sub(regions);
                }
            }
            for vm in alloc.vms.iter_mut() {
                if vm.vm_id == to {
                    vm.regions += regions;
                }
            }
        }
    }

    /// Relays a reclamation alert: which cache owns the VM, if any.
    pub fn owner_of_vm(&self, vm_id: VmId) -> Option<CacheId> {
        self.caches
            .values()
            .find(|a| a.vms.iter().any(|v| v.vm_id == vm_id))
            .map(|a| a.cache_id)
    }
}

/// Outcome of a reallocation.
#[derive(Debug, Clone, Default)]
pub struct ReallocOutcome {
    /// Regions added to the last existing VM's headroom.
    pub grown_on_last: u32,
    pub added: Vec<AllocatedCacheVm>,
    pub released: Vec<VmId>,
}

/// Server worker threads a VM hosting `r` of `total` regions must provide:
/// its proportional share of the configuration's server threads.
fn server_threads_for(config: &RdmaConfig, r: u64, total: u64) -> u32 {
    if config.server_threads == 0 || r == 0 {
        return 0;
    }
    ((config.server_threads as u64 * r).div_ceil(total)) as u32
}
