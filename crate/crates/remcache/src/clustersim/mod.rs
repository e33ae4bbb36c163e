//! Seeded cluster simulation: a menu of VM types, per-server resource
//! accounting, spot reclamation with early warnings, VM failures, and a
//! stranded-memory event generator calibrated to observed stranding
//! quartiles (6, 13, and 22 minutes).

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{NetworkDistance, VmId, VmKind, VmSpec};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ClusterError {
    #[error("no server at distance {distance} can host the VM")]
    CapacityUnavailable { distance: u32 },
    #[error("unknown vm {0}")]
    UnknownVm(VmId),
    #[error("operation only valid for spot VMs")]
    NotSpot,
    #[error("invalid cluster config: {0}")]
    BadConfig(String),
}

/// One physical server in the cluster.
#[derive(Debug, Clone)]
pub struct ClusterServer {
    pub id: u32,
    pub total_cores: u32,
    pub total_memory: u64,
    pub distance: NetworkDistance,
    pub free_cores: u32,
    pub free_memory: u64,
    /// While stranded, every core is pinned and no VM needing cores fits.
    pub stranded_until: Option<u64>,
}

/// A VM the cluster has handed out.
#[derive(Debug, Clone)]
pub struct AllocatedVm {
    pub vm_id: VmId,
    pub spec: VmSpec,
    pub server: u32,
    /// Set when a reclamation has been scheduled: (warning fired at,
    /// terminates at), virtual seconds.
    pub reclaim_at: Option<(f64, f64)>,
}

/// Synthetic stranding event: a server's cores are fully allocated while
/// memory remains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrandingEvent {
    pub server_id: u32,
    pub start_s: f64,
    pub duration_s: f64,
    pub stranded_memory: u64,
}

/// Cluster state: servers, the VM menu, and allocation accounting. The
/// caller owns time; methods take the current virtual clock where needed.
#[derive(Debug)]
pub struct ClusterSim {
    pub servers: Vec<ClusterServer>,
    pub vm_menu: Vec<VmSpec>,
    vms: BTreeMap<VmId, AllocatedVm>,
    next_vm: u64,
}

impl ClusterSim {
    pub fn new(servers: Vec<ClusterServer>, vm_menu: Vec<VmSpec>) -> Self {
        ClusterSim {
            servers,
            vm_menu,
            vms: BTreeMap::new(),
            next_vm: 1,
        }
    }

    /// A small uniform cluster: `n` servers per distance class.
    pub fn uniform(n_per_distance: usize, cores: u32, memory: u64, vm_menu: Vec<VmSpec>) -> Self {
        let mut servers = Vec::new();
        let mut id = 0;
        for d in NetworkDistance::ALL {
            for _ in 0..n_per_distance {
                servers.push(ClusterServer {
                    id,
                    total_cores: cores,
                    total_memory: memory,
                    distance: d,
                    free_cores: cores,
                    free_memory: memory,
                    stranded_until: None,
                });
                id += 1;
            }
        }
        ClusterSim::new(servers, vm_menu)
    }

    pub fn vm(&self, id: VmId) -> Option<&AllocatedVm> {
        self.vms.get(&id)
    }

    pub fn vm_mut(&mut self, id: VmId) -> Option<&mut AllocatedVm> {
        self.vms.get_mut(&id)
    }

    pub fn allocated_vms(&self) -> impl Iterator<Item = &AllocatedVm> {
        self.vms.values()
    }

    pub fn total_free_memory(&self) -> u64 {
        self.servers.iter().map(|s| s.free_memory).sum()
    }

    pub fn total_free_memory_at(&self, distance: NetworkDistance) -> u64 {
        self.servers
            .iter()
            .filter(|s| s.distance == distance)
            .map(|s| s.free_memory)
            .sum()
    }

    /// Accounting identity: allocated plus free equals total, per resource.
    pub fn conservation_holds(&self) -> bool {
        let alloc_cores: u32 = self.vms.values().map(|v| v.spec.cores).sum();
        let alloc_mem: u64 = self.vms.values().map(|v| v.spec.memory).sum();
        let stranded_cores: u32 = self
            .servers
            .iter()
            .filter(|s| s.stranded_until.is_some())
            .map(|s| {
                // cores pinned by the stranding event itself
                s.total_cores
                    - s.free_cores
                    - self
                        .vms
                        .values()
                        .filter(|v| v.server == s.id)
                        .map(|v| v.spec.cores)
                        .sum::<u32>()
            })
            .sum();
        let free_cores: u32 = self.servers.iter().map(|s| s.free_cores).sum();
        let free_mem: u64 = self.servers.iter().map(|s| s.free_memory).sum();
        let total_cores: u32 = self.servers.iter().map(|s| s.total_cores).sum();
        let total_mem: u64 = self.servers.iter().map(|s| s.total_memory).sum();
        alloc_cores + stranded_cores + free_cores == total_cores
            && alloc_mem + free_mem == total_mem
    }

    /// Allocates one VM of `spec` on a server at the given distance,
    /// first-fit in server-id order.
    pub fn allocate_vm(
        &mut self,
        spec: &VmSpec,
        distance: NetworkDistance,
        now_s: f64,
    ) -> Result<VmId, ClusterError> {
        let server = self
            .servers
            .iter_mut()
            .filter(|s| s.distance == distance)
            .find(|s| {
                let stranded = matches!(s.stranded_until, Some(until) if (now_s as u64) < until);
                s.free_memory >= spec.memory
                    && s.free_cores >= spec.cores
                    && !(stranded && spec.cores > 0)
            })
            .ok_or(ClusterError::CapacityUnavailable {
                distance: distance.switches(),
            })?;
        server.free_cores -= spec.cores;
        server.free_memory -= spec.memory;
        let server_id = server.id;
        let vm_id = VmId(self.next_vm);
        self.next_vm += 1;
        let mut spec = spec.clone();
        spec.distance_switches = distance.switches();
        self.vms.insert(
            vm_id,
            AllocatedVm {
                vm_id,
                spec,
                server: server_id,
                reclaim_at: None,
            },
        );
        Ok(vm_id)
    }

    /// Releases a VM's resources; unknown ids are ignored.
    pub fn release_vm(&mut self, vm_id: VmId) {
        if let Some(vm) = self.vms.remove(&vm_id) {
            let server = &mut self.servers[vm.server as usize];
            server.free_cores += vm.spec.cores;
            server.free_memory += vm.spec.memory;
        }
    }

    /// Schedules reclamation of a spot VM: the warning fires now and the VM
    /// terminates `warning_s` later. Returns the termination time.
    pub fn reclaim_spot(
        &mut self,
        vm_id: VmId,
        warning_s: f64,
        now_s: f64,
    ) -> Result<f64, ClusterError> {
        let vm = self.vms.get_mut(&vm_id).ok_or(ClusterError::UnknownVm(vm_id))?;
        if vm.spec.kind != VmKind::Spot {
            return Err(ClusterError::NotSpot);
        }
        let terminate = now_s + warning_s;
        vm.reclaim_at = Some((now_s, terminate));
        Ok(terminate)
    }

    /// Immediate VM failure: no warning. Returns whether the VM existed.
    pub fn fail_vm(&mut self, vm_id: VmId) -> bool {
        if self.vms.contains_key(&vm_id) {
            self.release_vm(vm_id);
            true
        } else {
            false
        }
    }

    /// Applies a stranding event: pins the server's free cores for the
    /// duration. Events whose server lacks a gigabyte of free memory are
    /// skipped (they would not strand anything).
    pub fn apply_stranding(&mut self, ev: &StrandingEvent) -> bool {
        let server = &mut self.servers[ev.server_id as usize];
        if server.free_memory < (1 << 30) || server.free_cores == 0 {
            return false;
        }
        server.free_cores = 0;
        server.stranded_until = Some((ev.start_s + ev.duration_s) as u64);
        true
    }

    /// Ends a stranding event, releasing the pinned cores.
    pub fn end_stranding(&mut self, ev: &StrandingEvent) {
        let server = &mut self.servers[ev.server_id as usize];
        if server.stranded_until.is_some() {
            let vm_cores: u32 = self
                .vms
                .values()
                .filter(|v| v.server == server.id)
                .map(|v| v.spec.cores)
                .sum();
            server.free_cores = server.total_cores - vm_cores;
            server.stranded_until = None;
        }
    }
}

/// Log-normal parameters (of the duration in minutes) fitted to the target
/// quartiles: sigma matches the p75/p25 ratio and mu balances the residual
/// deviation between the median and the outer quartiles.
pub fn fit_log_normal(q25: f64, q50: f64, q75: f64) -> (f64, f64) {
    const Z75: f64 = 0.674_489_750_196_081_7;
    let half_spread = (q75.ln() - q25.ln()) / 2.0;
    let sigma = half_spread / Z75;
    let mu = ((q25.ln() + q75.ln()) / 2.0 + q50.ln()) / 2.0;
    (mu, sigma)
}

/// Generator parameters for synthetic stranding events.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StrandingParams {
    /// Mean seconds between event starts across the cluster.
    pub mean_interarrival_s: f64,
    /// Duration quartiles in minutes the log-normal is fitted to.
    pub quartiles_min: (f64, f64, f64),
    /// Stranded bytes are drawn uniformly from this range (GiB).
    pub stranded_gib_range: (u64, u64),
}

impl Default for StrandingParams {
    fn default() -> Self {
        StrandingParams {
            mean_interarrival_s: 120.0,
            quartiles_min: (6.0, 13.0, 22.0),
            stranded_gib_range: (1, 64),
        }
    }
}

/// Draws a deterministic stranding-event schedule over `[0, horizon_s)`.
pub fn generate_stranding_events(
    seed: u64,
    horizon_s: f64,
    server_count: u32,
    params: &StrandingParams,
) -> Vec<StrandingEvent> {
    assert!(horizon_s > 0.0);
    let (q25, q50, q75) = params.quartiles_min;
    let (mu, sigma) = fit_log_normal(q25, q50, q75);
    let durations = LogNormal::new(mu, sigma).expect("valid log-normal parameters");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut t = 0.0f64;
    loop {
        // exponential interarrival
        let gap: f64 = -params.mean_interarrival_s * (1.0 - rng.gen::<f64>()).ln();
        t += gap;
        if t >= horizon_s {
            break;
        }
        let duration_min: f64 = durations.sample(&mut rng);
        let gib = rng.gen_range(params.stranded_gib_range.0..=params.stranded_gib_range.1);
        out.push(StrandingEvent {
            server_id: rng.gen_range(0..server_count),
            start_s: t,
            duration_s: duration_min * 60.0,
            stranded_memory: gib << 30,
        });
    }
    out
}

/// Samples `n` durations (minutes) from the fitted distribution.
pub fn sample_durations_min(seed: u64, n: usize, quartiles_min: (f64, f64, f64)) -> Vec<f64> {
    let (q25, q50, q75) = quartiles_min;
    let (mu, sigma) = fit_log_normal(q25, q50, q75);
    let dist = LogNormal::new(mu, sigma).expect("valid log-normal parameters");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| dist.sample(&mut rng)).collect()
}

// ---- cluster config file ------------------------------------------------

/// On-disk cluster description (TOML).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterConfigFile {
    #[serde(default)]
    pub servers: Vec<ServerGroup>,
    #[serde(default)]
    pub vm_menu: Vec<VmMenuRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ServerGroup {
    pub count: u32,
    pub cores: u32,
    pub memory_gb: u64,
    /// Switch hops from the client: 1, 3, or 5.
    pub distance: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VmMenuRow {
    pub vm_type: String,
    pub cores: u32,
    pub memory_gb: u64,
    pub price: f64,
    pub kind: VmKind,
}

impl ClusterConfigFile {
    pub fn parse(text: &str) -> Result<Self, ClusterError> {
        toml::from_str(text).map_err(|e| ClusterError::BadConfig(e.to_string()))
    }

    pub fn build(&self) -> Result<ClusterSim, ClusterError> {
        let mut servers = Vec::new();
        let mut id = 0;
        for group in &self.servers {
            let distance = NetworkDistance::from_switches(group.distance).ok_or_else(|| {
                ClusterError::BadConfig(format!("distance must be 1, 3, or 5, got {}", group.distance))
            })?;
            for _ in 0..group.count {
                servers.push(ClusterServer {
                    id,
                    total_cores: group.cores,
                    total_memory: group.memory_gb << 30,
                    distance,
                    free_cores: group.cores,
                    free_memory: group.memory_gb << 30,
                    stranded_until: None,
                });
                id += 1;
            }
        }
        let vm_menu = self
            .vm_menu
            .iter()
            .map(|row| VmSpec {
                vm_type: row.vm_type.clone(),
                cores: row.cores,
                memory: row.memory_gb << 30,
                price_per_hour: row.price,
                distance_switches: 1,
                kind: row.kind,
            })
            .collect();
        Ok(ClusterSim::new(servers, vm_menu))
    }
}
