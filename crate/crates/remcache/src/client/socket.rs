//! Socket-backend cache client. Application threads push operations into
//! per-thread SPSC rings; client threads translate, batch, and post them
//! over TCP connections (one per server VM per client thread), poll
//! completions from per-connection reader threads, and run callbacks in
//! per-application-thread issue order. It exists to exercise real thread
//! interleavings over the shared wire format, not performance fidelity.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::io::Write;
use std::net::TcpStream;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{mpsc, Arc, Mutex};
use std::thread::JoinHandle;

use crate::client::core::{CacheCore, ReadyCallback, RoutedSub};
use crate::client::{AppOpKind, ClientError, MigrationOptimizations, OpCallback};
use crate::region::RegionTable;
use crate::transport::ring::{Consumer, Producer, RingBuffer};
use crate::transport::wire::{self, encode_frame, read_frame, ConnectMsg, MsgType};
use crate::transport::{
    BatchCompletion, OpKind, QueuePairState, RegionToken, Request, RespStatus,
};
use crate::types::{CacheId, RdmaConfig, RegionId, VmId};

/// One cache server endpoint and how many regions it hosts for the cache.
#[derive(Debug, Clone)]
pub struct SocketEndpoint {
    pub addr: String,
    pub regions: u32,
}

struct AppOp {
    kind: AppOpKind,
    addr: u64,
    len: u64,
    payload: Option<Vec<u8>>,
    cb: OpCallback,
}

/// Handle owned by one application thread.
pub struct AppHandle {
    producer: Producer<AppOp>,
    app_thread: usize,
}

impl AppHandle {
    pub fn app_thread(&self) -> usize {
        self.app_thread
    }

    fn push(&mut self, mut op: AppOp) {
        loop {
            match self.producer.push(op) {
                Ok(()) => return,
                Err(back) => {
                    op = back;
                    std::thread::yield_now();
                }
            }
        }
    }

    /// Asynchronous read; `cb` receives the bytes on the client thread.
    pub fn read(&mut self, addr: u64, len: u64, cb: OpCallback) {
        self.push(AppOp {
            kind: AppOpKind::Read,
            addr,
            len,
            payload: None,
            cb,
        });
    }

    /// Asynchronous write.
    pub fn write(&mut self, addr: u64, payload: Vec<u8>, cb: OpCallback) {
        self.push(AppOp {
            kind: AppOpKind::Write,
            addr,
            len: payload.len() as u64,
            payload: Some(payload),
            cb,
        });
    }
}

/// A request to open a data-plane connection to a (usually new) VM.
struct NewConn {
    vm: VmId,
    addr: String,
    /// Regions to attach to, so the connection is granted their tokens.
    region_count: u32,
    opened: Arc<AtomicUsize>,
}

struct Shared {
    cache_id: CacheId,
    core: Mutex<CacheCore>,
    /// Per-client-thread queues of sub-ops released by migration cutovers.
    injected: Vec<Mutex<VecDeque<RoutedSub>>>,
    /// Per-client-thread requests to open new connections.
    conn_requests: Vec<Mutex<Vec<NewConn>>>,
    vm_endpoints: Mutex<BTreeMap<VmId, String>>,
    shutdown: AtomicBool,
}

/// Socket-backend cache. Data-plane operations flow through `AppHandle`s;
/// control-plane operations (migration, teardown) go through `&self`.
pub struct SocketCache {
    shared: Arc<Shared>,
    client_threads: Vec<JoinHandle<()>>,
    config: RdmaConfig,
}

struct LocalConn {
    vm: VmId,
    stream: TcpStream,
    qp: QueuePairState,
    pending: VecDeque<Request>,
    meta: HashMap<u64, Vec<(u64, OpKind, u32)>>,
    rx: mpsc::Receiver<(MsgType, Vec<u8>)>,
    alive: bool,
}

fn open_conn(
    cache_id: CacheId,
    addr: &str,
    region_count: u32,
    config: &RdmaConfig,
) -> std::io::Result<(TcpStream, Vec<(RegionId, RegionToken)>)> {
    let mut stream = TcpStream::connect(addr)?;
    stream.set_nodelay(true)?;
    let msg = ConnectMsg {
        cache_id,
        region_count: region_count as u16,
        client_threads: config.client_threads as u16,
        server_threads: config.server_threads as u16,
        batch_size: config.batch_size as u16,
        queue_depth: config.queue_depth as u16,
    };
    stream.write_all(&encode_frame(MsgType::Connect, &wire::encode_connect(&msg)))?;
    let (msg_type, body) = read_frame(&mut stream)?;
    if msg_type != MsgType::ConnectAck {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            "expected ConnectAck",
        ));
    }
    let tokens = wire::decode_connect_ack(&body)
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()))?;
    if tokens.len() < region_count as usize {
        return Err(std::io::Error::new(
            std::io::ErrorKind::OutOfMemory,
            "server could not allocate the requested regions",
        ));
    }
    Ok((stream, tokens))
}

fn spawn_reader(stream: &TcpStream) -> std::io::Result<mpsc::Receiver<(MsgType, Vec<u8>)>> {
    let mut reader = stream.try_clone()?;
    let (tx, rx) = mpsc::channel();
    std::thread::spawn(move || loop {
        match read_frame(&mut reader) {
            Ok(frame) => {
                if tx.send(frame).is_err() {
                    return;
                }
            }
            Err(_) => return,
        }
    });
    Ok(rx)
}

impl SocketCache {
    /// Creates a cache directly against a set of running servers: connects
    /// every client thread to every endpoint, builds the region table from
    /// the granted regions, and spawns the pipeline threads. Returns the
    /// cache plus one handle per application thread.
    pub fn create(
        cache_id: CacheId,
        capacity: u64,
        region_size: u64,
        endpoints: &[SocketEndpoint],
        config: RdmaConfig,
        app_threads: usize,
        opts: MigrationOptimizations,
    ) -> std::io::Result<(SocketCache, Vec<AppHandle>)> {
        let c = config.client_threads as usize;
        // connections[ct][i] pairs with endpoints[i]
        let mut conns: Vec<Vec<LocalConn>> = (0..c).map(|_| Vec::new()).collect();
        let mut mapping: Vec<(VmId, RegionId)> = Vec::new();
        let mut vm_endpoints = BTreeMap::new();
        for (i, ep) in endpoints.iter().enumerate() {
            let vm = VmId(i as u64);
            vm_endpoints.insert(vm, ep.addr.clone());
            let mut granted = Vec::new();
            for thread_conns in conns.iter_mut() {
                let (stream, tokens) = open_conn(cache_id, &ep.addr, ep.regions, &config)?;
                let rx = spawn_reader(&stream)?;
                thread_conns.push(LocalConn {
                    vm,
                    stream,
                    qp: QueuePairState::new(0, config.queue_depth),
                    pending: VecDeque::new(),
                    meta: HashMap::new(),
                    rx,
                    alive: true,
                });
                granted = tokens;
            }
            mapping.extend(granted.iter().map(|(rid, _)| (vm, *rid)));
        }
        let table = RegionTable::new(region_size, capacity, mapping)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidInput, e.to_string()))?;
        let core = CacheCore::new(cache_id, table, config, app_threads, opts);
        let shared = Arc::new(Shared {
            cache_id,
            core: Mutex::new(core),
            injected: (0..c).map(|_| Mutex::new(VecDeque::new())).collect(),
            conn_requests: (0..c).map(|_| Mutex::new(Vec::new())).collect(),
            vm_endpoints: Mutex::new(vm_endpoints),
            shutdown: AtomicBool::new(false),
        });

        // one SPSC ring per app thread, consumed by its bound client thread
        let mut handles = Vec::new();
        let mut consumers: Vec<Vec<(usize, Consumer<AppOp>)>> = (0..c).map(|_| Vec::new()).collect();
        for t in 0..app_threads {
            let (producer, consumer) = RingBuffer::with_capacity::<AppOp>(4096);
            handles.push(AppHandle {
                producer,
                app_thread: t,
            });
            consumers[t % c].push((t, consumer));
        }

        let mut client_threads = Vec::new();
        for (ct, (thread_conns, thread_consumers)) in
            conns.into_iter().zip(consumers).enumerate()
        {
            let shared2 = Arc::clone(&shared);
            client_threads.push(std::thread::spawn(move || {
                client_thread_loop(shared2, ct, thread_conns, thread_consumers)
            }));
        }
        Ok((
            SocketCache {
                shared,
                client_threads,
                config,
            },
            handles,
        ))
    }

    pub fn cache_id(&self) -> CacheId {
        self.shared.cache_id
    }

    pub fn stats(&self) -> crate::client::ClientStats {
        self.shared.core.lock().unwrap().stats
    }

    /// Blocks until no operations are live in the core.
    pub fn quiesce(&self) {
        loop {
            {
                let core = self.shared.core.lock().unwrap();
                if core.live_ops() == 0 && core.queued_len() == 0 {
                    return;
                }
            }
            std::thread::sleep(std::time::Duration::from_micros(200));
        }
    }

    /// Migrates `entries` one at a time to a fresh server at `target_addr`:
    /// the coordinator copies region bytes with migration reads, writes
    /// them to the target, and cuts each entry over, draining any writes
    /// queued while that region migrated. The old server is told to
    /// terminate once it hosts nothing.
    pub fn migrate_entries(&self, entries: &[usize], target_addr: &str) -> std::io::Result<()> {
        let region_size = {
            let core = self.shared.core.lock().unwrap();
            core.table.region_size()
        };
        // allocate destination regions on the target
        let (mut target_stream, target_tokens) = open_conn(
            self.shared.cache_id,
            target_addr,
            entries.len() as u32,
            &self.config,
        )?;
        let new_vm = {
            let mut eps = self.shared.vm_endpoints.lock().unwrap();
            let vm = VmId(eps.keys().map(|v| v.0).max().unwrap_or(0) + 1);
            eps.insert(vm, target_addr.to_string());
            vm
        };
        // every client thread opens its own data-plane connection first
        let opened = Arc::new(AtomicUsize::new(0));
        let threads = self.shared.injected.len();
        for ct in 0..threads {
            self.shared.conn_requests[ct].lock().unwrap().push(NewConn {
                vm: new_vm,
                addr: target_addr.to_string(),
                region_count: entries.len() as u32,
                opened: Arc::clone(&opened),
            });
        }
        while opened.load(Ordering::SeqCst) < threads {
            std::thread::sleep(std::time::Duration::from_micros(100));
        }

        let mut old_conns: HashMap<String, TcpStream> = HashMap::new();
        for (i, &entry) in entries.iter().enumerate() {
            let (old_vm, old_region) = {
                let mut core = self.shared.core.lock().unwrap();
                core.begin_entry_migration(entry);
                let e = core.table.entry(entry).expect("entry exists");
                (e.vm_id, e.physical_region_id)
            };
            let old_addr = self.shared.vm_endpoints.lock().unwrap()[&old_vm].clone();
            let old_stream = match old_conns.entry(old_addr.clone()) {
                std::collections::hash_map::Entry::Occupied(e) => e.into_mut(),
                std::collections::hash_map::Entry::Vacant(v) => {
                    let s = TcpStream::connect(&old_addr)?;
                    v.insert(s)
                }
            };
            let (new_region, _) = target_tokens[i];
            // chunked one-sided copy
            const CHUNK: u64 = 1 << 20;
            let mut off = 0u64;
            while off < region_size {
                let len = CHUNK.min(region_size - off) as u32;
                let req = wire::MigrationReadMsg {
                    region_id: old_region,
                    offset: off,
                    len,
                };
                old_stream.write_all(&encode_frame(
                    MsgType::MigrationRead,
                    &wire::encode_migration_read(&req),
                ))?;
                let (ty, body) = read_frame(old_stream)?;
                if ty != MsgType::MigrationRead {
                    return Err(std::io::Error::new(
                        std::io::ErrorKind::InvalidData,
                        "expected migration reply",
                    ));
                }
                let (status, bytes) = wire::decode_migration_reply(&body)
                    .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()))?;
                if status != RespStatus::Ok {
                    return Err(std::io::Error::new(
                        std::io::ErrorKind::BrokenPipe,
                        "migration source unavailable",
                    ));
                }
                // push to the destination region
                let batch = crate::transport::RequestBatch {
                    batch_id: off / CHUNK + 1,
                    requests: vec![Request::write(new_region, off, bytes, 0)],
                };
                target_stream.write_all(&encode_frame(
                    MsgType::RequestBatch,
                    &wire::encode_request_batch(&batch),
                ))?;
                let (ty, body) = read_frame(&mut target_stream)?;
                if ty != MsgType::ResponseBatch {
                    return Err(std::io::Error::new(
                        std::io::ErrorKind::InvalidData,
                        "expected write ack",
                    ));
                }
                let shape = [(OpKind::Write, len)];
                let resp = wire::decode_response_batch(&body, &shape)
                    .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()))?;
                if resp.responses[0].status != RespStatus::Ok {
                    return Err(std::io::Error::new(
                        std::io::ErrorKind::BrokenPipe,
                        "migration target rejected bytes",
                    ));
                }
                off += len as u64;
            }
            // cut over and release queued writes to the client threads
            let drained = {
                let mut core = self.shared.core.lock().unwrap();
                core.complete_entry_migration(entry, new_vm, new_region)
            };
            for sub in drained {
                self.shared.injected[sub.client_thread]
                    .lock()
                    .unwrap()
                    .push_back(sub);
            }
            // terminate the old server once it hosts nothing of this cache
            let still_used = {
                let core = self.shared.core.lock().unwrap();
                core.table.entries().iter().any(|e| e.vm_id == old_vm)
            };
            if !still_used {
                let _ = old_stream.write_all(&encode_frame(MsgType::Terminate, &[]));
            }
        }
        Ok(())
    }

    /// Stops the pipeline threads. In-flight operations are failed.
    pub fn shutdown(mut self) {
        self.shared.shutdown.store(true, Ordering::SeqCst);
        for h in self.client_threads.drain(..) {
            let _ = h.join();
        }
    }
}

fn client_thread_loop(
    shared: Arc<Shared>,
    ct: usize,
    mut conns: Vec<LocalConn>,
    mut consumers: Vec<(usize, Consumer<AppOp>)>,
) {
    let batch_cap = {
        let core = shared.core.lock().unwrap();
        core.config.batch_size as usize
    };
    let conn_index = |conns: &Vec<LocalConn>, vm: VmId| conns.iter().position(|c| c.vm == vm);
    loop {
        if shared.shutdown.load(Ordering::SeqCst) {
            return;
        }
        let mut did_work = false;

        // new connections requested by the migration coordinator; the
        // attach grants this connection the migrated regions' tokens
        let requests: Vec<NewConn> = shared.conn_requests[ct].lock().unwrap().drain(..).collect();
        for req in requests {
            let config = {
                let core = shared.core.lock().unwrap();
                core.config
            };
            if let Ok((stream, _)) = open_conn(shared.cache_id, &req.addr, req.region_count, &config)
            {
                if let Ok(rx) = spawn_reader(&stream) {
                    conns.push(LocalConn {
                        vm: req.vm,
                        stream,
                        qp: QueuePairState::new(0, config.queue_depth),
                        pending: VecDeque::new(),
                        meta: HashMap::new(),
                        rx,
                        alive: true,
                    });
                    req.opened.fetch_add(1, Ordering::SeqCst);
                    did_work = true;
                }
            }
        }

        // drain app rings: translate and stage sub-operations
        let mut ready: Vec<ReadyCallback> = Vec::new();
        for (app_thread, consumer) in consumers.iter_mut() {
            while let Some(op) = consumer.pop() {
                did_work = true;
                let out = {
                    let mut core = shared.core.lock().unwrap();
                    core.issue(*app_thread, op.kind, op.addr, op.len, op.payload, op.cb)
                };
                match out {
                    Ok(out) => {
                        ready.extend(out.ready);
                        for sub in out.routed {
                            stage(&mut conns, &conn_index, sub, &shared, &mut ready);
                        }
                    }
                    Err(_) => {
                        // backpressure from the write queue: spin briefly
                        std::thread::yield_now();
                    }
                }
            }
        }

        // sub-operations released by migration cutovers
        let injected: Vec<RoutedSub> = {
            let mut q = shared.injected[ct].lock().unwrap();
            q.drain(..).collect()
        };
        for sub in injected {
            did_work = true;
            stage(&mut conns, &conn_index, sub, &shared, &mut ready);
        }

        // poll completions
        for conn in conns.iter_mut() {
            loop {
                match conn.rx.try_recv() {
                    Ok((MsgType::ResponseBatch, body)) => {
                        did_work = true;
                        if body.len() < 8 {
                            continue;
                        }
                        let batch_id = u64::from_le_bytes(body[0..8].try_into().unwrap());
                        let shape: Vec<(OpKind, u32)> = match conn.meta.get(&batch_id) {
                            Some(m) => m.iter().map(|&(_, op, len)| (op, len)).collect(),
                            None => continue,
                        };
                        let completion = match wire::decode_response_batch(&body, &shape) {
                            Ok(d) => BatchCompletion::Done(d),
                            Err(_) => BatchCompletion::Failed { batch_id },
                        };
                        for c in conn.qp.complete(completion) {
                            deliver(conn, c, &shared, &mut ready);
                        }
                    }
                    Ok(_) => continue,
                    Err(mpsc::TryRecvError::Empty) => break,
                    Err(mpsc::TryRecvError::Disconnected) => {
                        if conn.alive {
                            conn.alive = false;
                            did_work = true;
                            for completion in conn.qp.fail_all() {
                                deliver(conn, completion, &shared, &mut ready);
                            }
                        }
                        break;
                    }
                }
            }
        }

        // flush: full batches eagerly, partials now that the rings drained
        for conn in conns.iter_mut() {
            while conn.alive && !conn.pending.is_empty() && conn.qp.has_free_slot() {
                let take = conn.pending.len().min(batch_cap);
                let requests: Vec<Request> = conn.pending.drain(..take).collect();
                let batch_id = conn.qp.try_claim_slot().expect("slot checked");
                let meta: Vec<(u64, OpKind, u32)> = requests
                    .iter()
                    .map(|r| (r.completion_tag, r.op, r.len))
                    .collect();
                conn.meta.insert(batch_id, meta);
                let batch = crate::transport::RequestBatch { batch_id, requests };
                let frame = encode_frame(MsgType::RequestBatch, &wire::encode_request_batch(&batch));
                if conn.stream.write_all(&frame).is_err() {
                    conn.alive = false;
                    for completion in conn.qp.fail_all() {
                        deliver(conn, completion, &shared, &mut ready);
                    }
                }
                did_work = true;
            }
        }

        // callbacks run on this client thread, in retirement order
        for (_, cb, outcome) in ready.drain(..) {
            cb(outcome);
        }

        if !did_work {
            std::thread::sleep(std::time::Duration::from_micros(20));
        }
    }
}

fn stage(
    conns: &mut Vec<LocalConn>,
    conn_index: &impl Fn(&Vec<LocalConn>, VmId) -> Option<usize>,
    sub: RoutedSub,
    shared: &Arc<Shared>,
    ready: &mut Vec<ReadyCallback>,
) {
    match conn_index(conns, sub.vm) {
        Some(i) if conns[i].alive => {
            let req = match sub.kind {
                AppOpKind::Read => Request::read(sub.region, sub.offset, sub.len, sub.tag),
                AppOpKind::Write => Request::write(sub.region, sub.offset, sub.payload, sub.tag),
            };
            conns[i].pending.push_back(req);
        }
        _ => {
            let mut core = shared.core.lock().unwrap();
            ready.extend(core.sub_result(sub.tag, Err(ClientError::TransportFailed)));
        }
    }
}

fn deliver(
    conn: &mut LocalConn,
    completion: BatchCompletion,
    shared: &Arc<Shared>,
    ready: &mut Vec<ReadyCallback>,
) {
    let (batch_id, responses) = match completion {
        BatchCompletion::Done(rb) => (rb.batch_id, Some(rb.responses)),
        BatchCompletion::Failed { batch_id } => (batch_id, None),
    };
    let meta = match conn.meta.remove(&batch_id) {
        Some(m) => m,
        None => return,
    };
    let mut core = shared.core.lock().unwrap();
    match responses {
        Some(responses) => {
            for ((tag, _, _), resp) in meta.into_iter().zip(responses) {
                let result = match resp.status {
                    RespStatus::Ok => Ok(resp.payload),
                    RespStatus::OutOfBounds => Err(ClientError::OutOfRange),
                    RespStatus::AccessDenied => Err(ClientError::TransportFailed),
                };
                ready.extend(core.sub_result(tag, result));
            }
        }
        None => {
            for (tag, _, _) in meta {
                ready.extend(core.sub_result(tag, Err(ClientError::TransportFailed)));
            }
        }
    }
}
