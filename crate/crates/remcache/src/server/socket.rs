//! Socket-backend cache server: speaks the shared wire format over TCP.
//! Each connection gets a reader thread that services one-sided transfers
//! and migration reads directly against the region store (the memory-agent
//! path); multi-request batches are handed to up to `server_threads`
//! executor threads, one queue per executor, preserving per-connection
//! batch order.

use std::io::Write;
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU32, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use crate::server::{ServerCore, ServerMode};
use crate::transport::wire::{
    self, encode_frame, read_frame, MsgType,
};
use crate::transport::{RegionToken, RequestBatch, RespStatus, ResponseBatch};
use crate::types::RegionId;

#[derive(Debug, Clone)]
pub struct SocketServerConfig {
    pub memory: u64,
    pub region_size: u64,
    pub server_threads: u32,
    /// Idle polling backoff for executor queues.
    pub idle_backoff: std::time::Duration,
}

impl Default for SocketServerConfig {
    fn default() -> Self {
        SocketServerConfig {
            memory: 4 << 30,
            region_size: 1 << 30,
            server_threads: 2,
            idle_backoff: std::time::Duration::from_micros(50),
        }
    }
}

struct ServerState {
    core: Mutex<ServerCore>,
    shutdown: AtomicBool,
    conn_seq: AtomicU32,
    threads: u32,
    executors: Vec<Mutex<mpsc::Sender<ExecutorJob>>>,
}

struct ExecutorJob {
    writer: Arc<Mutex<TcpStream>>,
    batch: RequestBatch,
    tokens: Vec<(RegionId, RegionToken)>,
}

/// A running socket cache server; dropping it leaves threads detached, so
/// call `shutdown` for orderly teardown in tests.
pub struct SocketServer {
    pub addr: std::net::SocketAddr,
    state: Arc<ServerState>,
    accept_handle: Option<JoinHandle<()>>,
}

impl SocketServer {
    /// Binds and serves in background threads.
    pub fn spawn(bind: &str, cfg: SocketServerConfig) -> std::io::Result<SocketServer> {
        let listener = TcpListener::bind(bind)?;
        let addr = listener.local_addr()?;
        listener.set_nonblocking(true)?;
        let mut executors = Vec::new();
        let mut exec_receivers = Vec::new();
        for _ in 0..cfg.server_threads {
            let (tx, rx) = mpsc::channel::<ExecutorJob>();
            executors.push(Mutex::new(tx));
            exec_receivers.push(rx);
        }
        let state = Arc::new(ServerState {
            core: Mutex::new(ServerCore::new(cfg.memory, cfg.region_size)),
            shutdown: AtomicBool::new(false),
            conn_seq: AtomicU32::new(0),
            threads: cfg.server_threads,
            executors,
        });
        for rx in exec_receivers {
            let state2 = Arc::clone(&state);
            let backoff = cfg.idle_backoff;
            std::thread::spawn(move || executor_loop(state2, rx, backoff));
        }
        let state2 = Arc::clone(&state);
        let accept_handle = std::thread::spawn(move || accept_loop(listener, state2));
        Ok(SocketServer {
            addr,
            state,
            accept_handle: Some(accept_handle),
        })
    }

    pub fn shutdown(mut self) {
        self.state.shutdown.store(true, Ordering::SeqCst);
        if let Some(h) = self.accept_handle.take() {
            let _ = h.join();
        }
    }

    pub fn is_terminated(&self) -> bool {
        self.state.core.lock().unwrap().mode == ServerMode::Terminated
    }
}

fn accept_loop(listener: TcpListener, state: Arc<ServerState>) {
    loop {
        if state.shutdown.load(Ordering::SeqCst) {
            return;
        }
        match listener.accept() {
            Ok((stream, _)) => {
                let state2 = Arc::clone(&state);
                std::thread::spawn(move || {
                    let _ = connection_loop(stream, state2);
                });
            }
            Err(ref e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                std::thread::sleep(std::time::Duration::from_millis(1));
            }
            Err(_) => return,
        }
    }
}

fn write_frame(writer: &Arc<Mutex<TcpStream>>, msg_type: MsgType, body: &[u8]) -> std::io::Result<()> {
    let frame = encode_frame(msg_type, body);
    let mut w = writer.lock().unwrap();
    w.write_all(&frame)
}

fn connection_loop(stream: TcpStream, state: Arc<ServerState>) -> std::io::Result<()> {
    let mut reader = stream.try_clone()?;
    let writer = Arc::new(Mutex::new(stream));
    // per-connection grant set, filled by Connect
    let mut tokens: Vec<(RegionId, RegionToken)> = Vec::new();
    let executor = if state.threads > 0 {
        (state.conn_seq.fetch_add(1, Ordering::SeqCst) % state.threads) as usize
    } else {
        0
    };
    loop {
        if state.shutdown.load(Ordering::SeqCst) {
            return Ok(());
        }
        let (msg_type, body) = match read_frame(&mut reader) {
            Ok(x) => x,
            Err(_) => return Ok(()), // peer closed
        };
        match msg_type {
            MsgType::Connect => {
                let msg = match wire::decode_connect(&body) {
                    Ok(m) => m,
                    Err(_) => return Ok(()),
                };
                let granted = {
                    let mut core = state.core.lock().unwrap();
                    core.handle_connect(msg.cache_id, msg.region_count as u32)
                };
                match granted {
                    Ok(t) => {
                        tokens = t.clone();
                        write_frame(&writer, MsgType::ConnectAck, &wire::encode_connect_ack(&t))?;
                    }
                    Err(_) => {
                        // an empty ack signals allocation failure
                        write_frame(&writer, MsgType::ConnectAck, &wire::encode_connect_ack(&[]))?;
                    }
                }
            }
            MsgType::RequestBatch => {
                let batch = match wire::decode_request_batch(&body) {
                    Ok(b) => b,
                    Err(_) => return Ok(()),
                };
                if batch.requests.len() == 1 {
                    // one-sided: the memory agent path, no executor involved
                    let resp = {
                        let mut core = state.core.lock().unwrap();
                        execute(&mut core, &batch, &tokens)
                    };
                    write_frame(&writer, MsgType::ResponseBatch, &wire::encode_response_batch(&resp))?;
                } else if state.threads == 0 {
                    // batching is disabled without server threads
                    let resp = ResponseBatch {
                        batch_id: batch.batch_id,
                        responses: batch
                            .requests
                            .iter()
                            .map(|_| crate::transport::Response {
                                status: RespStatus::AccessDenied,
                                payload: Vec::new(),
                            })
                            .collect(),
                    };
                    write_frame(&writer, MsgType::ResponseBatch, &wire::encode_response_batch(&resp))?;
                } else {
                    let job = ExecutorJob {
                        writer: Arc::clone(&writer),
                        batch,
                        tokens: tokens.clone(),
                    };
                    if state.executors[executor].lock().unwrap().send(job).is_err() {
                        return Ok(());
                    }
                }
            }
            MsgType::MigrationRead => {
                let msg = match wire::decode_migration_read(&body) {
                    Ok(m) => m,
                    Err(_) => return Ok(()),
                };
                let reply = {
                    let core = state.core.lock().unwrap();
                    match core.migration_read(msg.region_id, msg.offset, msg.len) {
                        Ok(bytes) => wire::encode_migration_reply(RespStatus::Ok, &bytes),
                        Err(status) => wire::encode_migration_reply(status, &[]),
                    }
                };
                write_frame(&writer, MsgType::MigrationRead, &reply)?;
            }
            MsgType::Terminate => {
                state.core.lock().unwrap().mode = ServerMode::Terminated;
                state.shutdown.store(true, Ordering::SeqCst);
                return Ok(());
            }
            other => {
                return Err(std::io::Error::new(
                    std::io::ErrorKind::InvalidData,
                    format!("unexpected {other:?}"),
                ));
            }
        }
    }
}

fn execute(core: &mut ServerCore, batch: &RequestBatch, tokens: &[(RegionId, RegionToken)]) -> ResponseBatch {
    core.execute_batch(batch, &|rid| {
        tokens.iter().find(|(r, _)| *r == rid).map(|(_, t)| *t)
    })
}

fn executor_loop(
    state: Arc<ServerState>,
    rx: mpsc::Receiver<ExecutorJob>,
    backoff: std::time::Duration,
) {
    loop {
        if state.shutdown.load(Ordering::SeqCst) {
            return;
        }
        match rx.recv_timeout(backoff) {
            Ok(job) => {
                let resp = {
                    let mut core = state.core.lock().unwrap();
                    execute(&mut core, &job.batch, &job.tokens)
                };
                let _ =
                    write_frame(&job.writer, MsgType::ResponseBatch, &wire::encode_response_batch(&resp));
            }
            Err(mpsc::RecvTimeoutError::Timeout) => continue,
            Err(mpsc::RecvTimeoutError::Disconnected) => return,
        }
    }
}
