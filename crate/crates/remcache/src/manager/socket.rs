//! Manager RPC endpoint over the shared socket framing. The socket-mode
//! cluster maps each configured server row to a cache-server endpoint
//! (index-aligned), so allocations come back with the addresses to connect
//! to. The full reclamation alert push is a simulated-backend feature; over
//! RPC the alert returns the owning cache for the caller to act on.

use std::io::Write;
use std::net::TcpListener;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use crate::clustersim::ClusterSim;
use crate::manager::rpc::{
    decode_request, encode_response, ManagerRpcRequest, ManagerRpcResponse, RpcErrorKind, RpcVm,
};
use crate::manager::{AllocationRequest, Manager, ManagerError};
use crate::transport::wire::{encode_frame, read_frame, MsgType};

struct RpcState {
    manager: Manager,
    cluster: ClusterSim,
    endpoints: Vec<String>,
    started: std::time::Instant,
}

pub struct ManagerRpcServer {
    pub addr: std::net::SocketAddr,
    shutdown: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl ManagerRpcServer {
    /// Serves manager RPCs; `endpoints[i]` is the cache-server address of
    /// cluster server `i`.
    pub fn spawn(
        bind: &str,
        manager: Manager,
        cluster: ClusterSim,
        endpoints: Vec<String>,
    ) -> std::io::Result<ManagerRpcServer> {
        if endpoints.len() != cluster.servers.len() {
            return Err(std::io::Error::new(
                std::io::ErrorKind::InvalidInput,
                format!(
                    "need one endpoint per cluster server: {} servers, {} endpoints",
                    cluster.servers.len(),
                    endpoints.len()
                ),
            ));
        }
        let listener = TcpListener::bind(bind)?;
        let addr = listener.local_addr()?;
        listener.set_nonblocking(true)?;
        let shutdown = Arc::new(AtomicBool::new(false));
        let state = Arc::new(Mutex::new(RpcState {
            manager,
            cluster,
            endpoints,
            started: std::time::Instant::now(),
        }));
        let shutdown2 = Arc::clone(&shutdown);
        let handle = std::thread::spawn(move || loop {
            if shutdown2.load(Ordering::SeqCst) {
                return;
            }
            match listener.accept() {
                Ok((stream, _)) => {
                    let state2 = Arc::clone(&state);
                    std::thread::spawn(move || {
                        let _ = serve_conn(stream, state2);
                    });
                }
                Err(ref e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                    std::thread::sleep(std::time::Duration::from_millis(2));
                }
                Err(_) => return,
            }
        });
        Ok(ManagerRpcServer {
            addr,
            shutdown,
            handle: Some(handle),
        })
    }

    pub fn shutdown(mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn serve_conn(
    mut stream: std::net::TcpStream,
    state: Arc<Mutex<RpcState>>,
) -> std::io::Result<()> {
    loop {
        let (msg_type, body) = match read_frame(&mut stream) {
            Ok(x) => x,
            Err(_) => return Ok(()),
        };
        if msg_type != MsgType::ManagerRequest {
            return Ok(());
        }
        let resp = match decode_request(&body) {
            Ok(req) => handle(&state, req),
            Err(e) => ManagerRpcResponse::Error {
                kind: RpcErrorKind::Internal,
                message: e.to_string(),
            },
        };
        stream.write_all(&encode_frame(MsgType::ManagerResponse, &encode_response(&resp)))?;
    }
}

fn handle(state: &Arc<Mutex<RpcState>>, req: ManagerRpcRequest) -> ManagerRpcResponse {
    let mut st = state.lock().unwrap();
    let now_s = st.started.elapsed().as_secs_f64();
    let st = &mut *st;
    match req {
        ManagerRpcRequest::Allocate {
            memory,
            slo,
            duration,
        } => {
            let result = st.manager.allocate(
                &mut st.cluster,
                &AllocationRequest {
                    memory,
                    slo,
                    duration,
                },
                now_s,
            );
            match result {
                Ok(res) => {
                    let vms = res
                        .vms
                        .iter()
                        .map(|vm| RpcVm {
                            vm_id: vm.vm_id,
                            spec: vm.spec.clone(),
                            regions: vm.regions,
                            server_threads: vm.server_threads,
                            endpoint: st
                                .cluster
                                .vm(vm.vm_id)
                                .map(|a| st.endpoints[a.server as usize].clone()),
                        })
                        .collect();
                    ManagerRpcResponse::Allocated {
                        cache_id: res.cache_id,
                        vms,
                        config: res.config,
                        distance_switches: res.distance.switches(),
                    }
                }
                Err(e) => error_response(e),
            }
        }
        ManagerRpcRequest::Reallocate {
            cache_id,
            delta_regions,
        } => match st.manager.reallocate(&mut st.cluster, cache_id, delta_regions, now_s) {
            Ok(out) => ManagerRpcResponse::Reallocated {
                grown_on_last: out.grown_on_last,
                added: out
                    .added
                    .iter()
                    .map(|vm| RpcVm {
                        vm_id: vm.vm_id,
                        spec: vm.spec.clone(),
                        regions: vm.regions,
                        server_threads: vm.server_threads,
                        endpoint: st
                            .cluster
                            .vm(vm.vm_id)
                            .map(|a| st.endpoints[a.server as usize].clone()),
                    })
                    .collect(),
                released: out.released,
            },
            Err(e) => error_response(e),
        },
        ManagerRpcRequest::Deallocate { cache_id } => {
            match st.manager.deallocate(&mut st.cluster, cache_id) {
                Ok(()) => ManagerRpcResponse::Ok,
                Err(e) => error_response(e),
            }
        }
        ManagerRpcRequest::NotifyReclamation { vm_id, .. } => {
            ManagerRpcResponse::ReclamationRelayed {
                owner: st.manager.owner_of_vm(vm_id),
            }
        }
    }
}

fn error_response(e: ManagerError) -> ManagerRpcResponse {
    let kind = match e {
        ManagerError::SloUnsatisfiable => RpcErrorKind::SloUnsatisfiable,
        ManagerError::CapacityUnavailable | ManagerError::Cluster(_) => {
            RpcErrorKind::CapacityUnavailable
        }
        ManagerError::UnknownCache(_) => RpcErrorKind::UnknownCache,
    };
    ManagerRpcResponse::Error {
        kind,
        message: e.to_string(),
    }
}

/// One round-trip RPC call to a manager endpoint.
pub fn call(addr: &str, req: &ManagerRpcRequest) -> std::io::Result<ManagerRpcResponse> {
    let mut stream = std::net::TcpStream::connect(addr)?;
    stream.write_all(&encode_frame(
        MsgType::ManagerRequest,
        &crate::manager::rpc::encode_request(req),
    ))?;
    let (msg_type, body) = read_frame(&mut stream)?;
    if msg_type != MsgType::ManagerResponse {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            "expected manager response",
        ));
    }
    crate::manager::rpc::decode_response(&body)
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()))
}
