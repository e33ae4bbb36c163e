//! Manager RPC surface over the shared socket framing. Request and response
//! bodies are JSON inside `ManagerRequest` / `ManagerResponse` frames; the
//! simulated backend calls the manager in-process instead.

use serde::{Deserialize, Serialize};

use crate::types::{CacheDuration, CacheId, NetworkDistance, RdmaConfig, Slo, VmId, VmSpec};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum ManagerRpcRequest {
    Allocate {
        memory: u64,
        slo: Slo,
        duration: CacheDuration,
    },
    Reallocate {
        cache_id: CacheId,
        delta_regions: i64,
    },
    Deallocate {
        cache_id: CacheId,
    },
    NotifyReclamation {
        vm_id: VmId,
        warning_seconds: f64,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RpcVm {
    pub vm_id: VmId,
    pub spec: VmSpec,
    pub regions: u32,
    pub server_threads: u32,
    /// Where the VM's cache server agent listens (socket backend).
    pub endpoint: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum ManagerRpcResponse {
    Allocated {
        cache_id: CacheId,
        vms: Vec<RpcVm>,
        config: RdmaConfig,
        distance_switches: u32,
    },
    Reallocated {
        grown_on_last: u32,
        added: Vec<RpcVm>,
        released: Vec<VmId>,
    },
    Ok,
    /// Reclamation alert accepted; the owning cache, when known.
    ReclamationRelayed {
        owner: Option<CacheId>,
    },
    Error {
        kind: RpcErrorKind,
        message: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RpcErrorKind {
    SloUnsatisfiable,
    CapacityUnavailable,
    UnknownCache,
    Internal,
}

pub fn encode_request(req: &ManagerRpcRequest) -> Vec<u8> {
    serde_json::to_vec(req).expect("rpc request serializes")
}

pub fn decode_request(body: &[u8]) -> Result<ManagerRpcRequest, serde_json::Error> {
    serde_json::from_slice(body)
}

pub fn encode_response(resp: &ManagerRpcResponse) -> Vec<u8> {
    serde_json::to_vec(resp).expect("rpc response serializes")
}

pub fn decode_response(body: &[u8]) -> Result<ManagerRpcResponse, serde_json::Error> {
    serde_json::from_slice(body)
}

pub fn distance_from_switches(switches: u32) -> NetworkDistance {
    NetworkDistance::from_switches(switches).unwrap_or(NetworkDistance::IntraRack)
}
