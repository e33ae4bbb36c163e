//! The simulated world: servers, connections, and the network cost model
//! wired to one virtual clock. Client pipelines and the cluster attach on
//! top of the primitives here.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::client::sim::{CompletionNote, SimCacheRuntime};
use crate::clustersim::ClusterSim;
use crate::manager::Manager;
use crate::server::{ServerCore, ServerMode};
use crate::sim::engine::{EventLog, EventQueue};
use crate::transport::netmodel::{us_to_ns, NetworkModel, SimNanos};
use crate::transport::wire::HEADER_LEN;
use crate::transport::{
    BatchCompletion, OpKind, PostOutcome, QueuePairState, RegionToken, Request, RequestBatch,
    RespStatus, TransportError,
};
use crate::types::{CacheId, NetworkDistance, RdmaConfig, RegionId, VmId};

/// Index of a server agent slot in the world.
pub type ServerSlot = usize;

/// Index of a connection in the world.
pub type ConnId = usize;

pub type Event = Box<dyn FnOnce(&mut SimWorld)>;

/// Who consumes completions arriving on a connection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConnOwner {
    /// Deliver into `SimWorld::collected`, for tests and probes.
    Collector,
    /// Deliver to a cache runtime's client-thread pipeline.
    Cache { cache: usize, client_thread: usize },
}

pub struct SimServer {
    pub vm: VmId,
    pub core: ServerCore,
    /// Server threads available for two-sided batches on this agent.
    pub threads: u32,
    nic_busy: SimNanos,
    thread_busy: Vec<SimNanos>,
    conn_seq: u32,
}

pub struct SimConn {
    pub server: ServerSlot,
    pub distance: NetworkDistance,
    pub qp: QueuePairState,
    pub tokens: BTreeMap<RegionId, RegionToken>,
    pub owner: ConnOwner,
    pub closed: bool,
    batch_cap: u32,
    thread_idx: u32,
    tx_busy: SimNanos,
}

/// One simulated world. Events are closures over `&mut SimWorld`; ties on
/// the clock break by schedule order, so runs are deterministic.
pub struct SimWorld {
    pub clock: SimNanos,
    pub model: NetworkModel,
    pub log: EventLog,
    events: EventQueue<Event>,
    noise: Option<ChaCha8Rng>,
    pub servers: Vec<SimServer>,
    pub conns: Vec<SimConn>,
    /// Completions for `ConnOwner::Collector` connections.
    pub collected: Vec<(ConnId, BatchCompletion)>,
    /// Cache-owned completions parked here until the cache layer drains
    /// them; see the client sim driver.
    pub cache_inbox: Vec<(ConnId, BatchCompletion)>,
    pub cluster: Option<ClusterSim>,
    pub manager: Option<Manager>,
    pub caches: Vec<SimCacheRuntime>,
    pub completion_notes: Vec<CompletionNote>,
}

impl SimWorld {
    pub fn new(model: NetworkModel, noise_seed: u64) -> Self {
        let noise = model
            .noise_amplitude
            .map(|_| ChaCha8Rng::seed_from_u64(noise_seed));
        SimWorld {
            clock: 0,
            model,
            log: EventLog::new(false),
            events: EventQueue::new(),
            noise,
            servers: Vec::new(),
            conns: Vec::new(),
            collected: Vec::new(),
            cache_inbox: Vec::new(),
            cluster: None,
            manager: None,
            caches: Vec::new(),
            completion_notes: Vec::new(),
        }
    }

    pub fn now(&self) -> SimNanos {
        self.clock
    }

    pub fn schedule_at(&mut self, time: SimNanos, ev: Event) {
        debug_assert!(time >= self.clock);
        self.events.schedule(time, ev);
    }

    pub fn schedule_in(&mut self, delta: SimNanos, ev: Event) {
        self.events.schedule(self.clock + delta, ev);
    }

    /// Runs one event; false when the queue is empty.
    pub fn step(&mut self) -> bool {
        match self.events.pop() {
            Some((time, ev)) => {
                debug_assert!(time >= self.clock);
                self.clock = time;
                ev(self);
                self.drain_cache_inbox();
                true
            }
            None => false,
        }
    }

    /// Runs events until the queue drains.
    pub fn run_to_idle(&mut self) {
        while self.step() {}
    }

    /// Runs events with time at or before `deadline`; the clock ends at
    /// `deadline` even if trailing events exist beyond it.
    pub fn run_until(&mut self, deadline: SimNanos) {
        while let Some(t) = self.events.next_time() {
            if t > deadline {
                break;
            }
            self.step();
        }
        if self.clock < deadline {
            self.clock = deadline;
        }
    }

    /// Applies seeded jitter to a duration in microseconds.
    fn jitter_us(&mut self, us: f64) -> f64 {
        match (&mut self.noise, self.model.noise_amplitude) {
            (Some(rng), Some(a)) if a > 0.0 => us * (1.0 + rng.gen_range(-a..=a)),
            _ => us,
        }
    }

    // ---- servers and connections ------------------------------------

    /// Registers a server agent for a VM with the given memory and thread
    /// budget; returns its slot.
    pub fn add_server(&mut self, vm: VmId, memory: u64, region_size: u64, threads: u32) -> ServerSlot {
        self.servers.push(SimServer {
            vm,
            core: ServerCore::new(memory, region_size),
            threads,
            nic_busy: 0,
            thread_busy: vec![0; threads as usize],
            conn_seq: 0,
        });
        self.servers.len() - 1
    }

    pub fn server_slot_of_vm(&self, vm: VmId) -> Option<ServerSlot> {
        self.servers.iter().position(|s| s.vm == vm)
    }

    /// Establishes a connection to a server agent, allocating (or attaching
    /// to) `region_count` regions for `cache`. Returns the connection and
    /// its region access tokens.
    pub fn connect(
        &mut self,
        server: ServerSlot,
        cache: CacheId,
        region_count: u32,
        config: &RdmaConfig,
        distance: NetworkDistance,
        owner: ConnOwner,
    ) -> Result<(ConnId, Vec<(RegionId, RegionToken)>), TransportError> {
        let srv = &mut self.servers[server];
        if srv.core.mode == ServerMode::Terminated {
            return Err(TransportError::ConnectionFailed("server terminated".into()));
        }
        let tokens = srv.core.handle_connect(cache, region_count)?;
        let thread_idx = if srv.threads > 0 {
            srv.conn_seq % srv.threads
        } else {
            0
        };
        srv.conn_seq += 1;
        let conn = SimConn {
            server,
            distance,
            qp: QueuePairState::new(self.conns.len() as u64, config.queue_depth),
            tokens: tokens.iter().copied().collect(),
            owner,
            closed: false,
            batch_cap: config.batch_size,
            thread_idx,
            tx_busy: 0,
        };
        self.conns.push(conn);
        let id = self.conns.len() - 1;
        self.log
            .push(self.clock, format!("connect conn={id} server={server} regions={region_count}"));
        Ok((id, tokens))
    }

    /// Connection that attaches to a server without allocating regions;
    /// used for migration targets, whose region tokens arrive per entry as
    /// the copies cut over.
    pub fn attach_conn(
        &mut self,
        server: ServerSlot,
        config: &RdmaConfig,
        distance: NetworkDistance,
        owner: ConnOwner,
    ) -> Result<ConnId, TransportError> {
        let srv = &mut self.servers[server];
        if srv.core.mode == ServerMode::Terminated {
            return Err(TransportError::ConnectionFailed("server terminated".into()));
        }
        let thread_idx = if srv.threads > 0 {
            srv.conn_seq % srv.threads
        } else {
            0
        };
        srv.conn_seq += 1;
        self.conns.push(SimConn {
            server,
            distance,
            qp: QueuePairState::new(self.conns.len() as u64, config.queue_depth),
            tokens: BTreeMap::new(),
            owner,
            closed: false,
            batch_cap: config.batch_size,
            thread_idx,
            tx_busy: 0,
        });
        Ok(self.conns.len() - 1)
    }

    /// Posts a batch of requests on a connection. A single-request batch is
    /// sent as a one-sided transfer; larger batches go to a server thread.
    pub fn post_batch(
        &mut self,
        conn_id: ConnId,
        requests: Vec<Request>,
    ) -> Result<PostOutcome, TransportError> {
        let now = self.clock;
        let conn = &mut self.conns[conn_id];
        if conn.closed {
            return Err(TransportError::ConnectionLost);
        }
        if requests.is_empty() || requests.len() > conn.batch_cap as usize {
            return Err(TransportError::BatchTooLarge {
                len: requests.len(),
                cap: conn.batch_cap,
            });
        }
        let batch_id = match conn.qp.try_claim_slot() {
            Some(id) => id,
            None => return Ok(PostOutcome::Backpressured),
        };
        let batch = RequestBatch { batch_id, requests };
        let batch_id = batch.batch_id;

        let wire_bytes = (HEADER_LEN + batch.wire_body_len()) as u64;
        let write_payload: usize = batch.requests.iter().map(|r| r.payload.len()).sum();
        let mut cost_us = self.model.client_post_cost_us;
        if write_payload > 0 && !self.model.inlines(wire_bytes as u32) {
            cost_us += self.model.pcie_fetch_cost_us;
        }
        let depart = now.max(conn.tx_busy) + us_to_ns(self.jitter_us(cost_us));
        let tx_done = depart + us_to_ns(self.model.wire_time_us(wire_bytes));
        let conn = &mut self.conns[conn_id];
        conn.tx_busy = tx_done;
        let half_rtt = self.model.base_rtt(conn.distance) / 2.0;
        let arrival = tx_done + us_to_ns(self.jitter_us(half_rtt));
        self.log.push(
            now,
            format!("post conn={conn_id} batch={} n={}", batch.batch_id, batch.requests.len()),
        );
        self.schedule_at(
            arrival,
            Box::new(move |w| w.server_receive(conn_id, batch)),
        );
        Ok(PostOutcome::Accepted { batch_id })
    }

    fn server_receive(&mut self, conn_id: ConnId, batch: RequestBatch) {
        let now = self.clock;
        let server_slot = self.conns[conn_id].server;
        let srv = &mut self.servers[server_slot];
        if srv.core.mode == ServerMode::Terminated || self.conns[conn_id].closed {
            let batch_id = batch.batch_id;
            self.deliver_failure(conn_id, batch_id);
            return;
        }
        if batch.requests.len() == 1 {
            // One-sided: serviced by the NIC, no server thread involvement.
            let start = now.max(srv.nic_busy);
            let done = start + us_to_ns(self.model.nic_onesided_cost_us);
            self.servers[server_slot].nic_busy = done;
            self.schedule_at(
                done,
                Box::new(move |w| w.execute_and_respond(conn_id, batch)),
            );
        } else {
            if srv.threads == 0 {
                // Batching is disabled without server threads.
                let resp = crate::transport::ResponseBatch {
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
                self.respond(conn_id, resp);
                return;
            }
            let t = self.conns[conn_id].thread_idx as usize;
            let service =
                self.model.server_cpu_cost_per_request_us * batch.requests.len() as f64;
            let service = self.jitter_us(service);
            let srv = &mut self.servers[server_slot];
            let start = now.max(srv.thread_busy[t]);
            let done = start + us_to_ns(service);
            srv.thread_busy[t] = done;
            self.schedule_at(
                done,
                Box::new(move |w| w.execute_and_respond(conn_id, batch)),
            );
        }
    }

    fn execute_and_respond(&mut self, conn_id: ConnId, batch: RequestBatch) {
        let server_slot = self.conns[conn_id].server;
        if self.servers[server_slot].core.mode == ServerMode::Terminated
            || self.conns[conn_id].closed
        {
            let batch_id = batch.batch_id;
            self.deliver_failure(conn_id, batch_id);
            return;
        }
        // Split borrow: tokens live on the connection, execution on the server.
        let tokens = std::mem::take(&mut self.conns[conn_id].tokens);
        let resp = self.servers[server_slot]
            .core
            .execute_batch(&batch, &|rid| tokens.get(&rid).copied());
        self.conns[conn_id].tokens = tokens;
        self.respond(conn_id, resp);
    }

    fn respond(&mut self, conn_id: ConnId, resp: crate::transport::ResponseBatch) {
        let body_len: usize = 8
            + 2
            + resp
                .responses
                .iter()
                .map(|r| 1 + r.payload.len())
                .sum::<usize>();
        let wire = us_to_ns(self.model.wire_time_us((HEADER_LEN + body_len) as u64));
        let half_rtt = us_to_ns(self.jitter_us(self.model.base_rtt(self.conns[conn_id].distance) / 2.0));
        let completion_cost = us_to_ns(self.jitter_us(self.model.client_completion_cost_us));
        let at = self.clock + wire + half_rtt + completion_cost;
        self.schedule_at(
            at,
            Box::new(move |w| w.client_receive(conn_id, BatchCompletion::Done(resp))),
        );
    }

    fn deliver_failure(&mut self, conn_id: ConnId, batch_id: u64) {
        let half_rtt = us_to_ns(self.model.base_rtt(self.conns[conn_id].distance) / 2.0);
        let at = self.clock + half_rtt;
        self.schedule_at(
            at,
            Box::new(move |w| w.client_receive(conn_id, BatchCompletion::Failed { batch_id })),
        );
    }

    fn client_receive(&mut self, conn_id: ConnId, completion: BatchCompletion) {
        if self.conns[conn_id].closed {
            // already failed by fail_all when the connection went down
            return;
        }
        let ready = self.conns[conn_id].qp.complete(completion);
        let owner = self.conns[conn_id].owner;
        for c in ready {
            self.log
                .push(self.clock, format!("complete conn={conn_id} batch={}", c.batch_id()));
            match owner {
                ConnOwner::Collector => self.collected.push((conn_id, c)),
                ConnOwner::Cache { .. } => self.cache_inbox.push((conn_id, c)),
            }
        }
    }

    /// One-sided transfer: a single read or write serviced without server
    /// thread involvement. Bounds and token checks happen at the server.
    pub fn one_sided_transfer(
        &mut self,
        conn_id: ConnId,
        op: OpKind,
        region: RegionId,
        offset: u64,
        len: u32,
        payload: Vec<u8>,
    ) -> Result<PostOutcome, TransportError> {
        if !self.conns[conn_id].tokens.contains_key(&region) {
            return Err(TransportError::AccessDenied);
        }
        let req = match op {
            OpKind::Read => Request::read(region, offset, len, 0),
            OpKind::Write => Request::write(region, offset, payload, 0),
        };
        self.post_batch(conn_id, vec![req])
    }

    /// Marks a server's VM as terminated: pending batches fail, its
    /// connections close, and regions become unreachable.
    pub fn terminate_server(&mut self, slot: ServerSlot) {
        self.servers[slot].core.mode = ServerMode::Terminated;
        self.log.push(self.clock, format!("terminate server={slot}"));
        for conn_id in 0..self.conns.len() {
            if self.conns[conn_id].server == slot && !self.conns[conn_id].closed {
                self.conns[conn_id].closed = true;
                let failed = self.conns[conn_id].qp.fail_all();
                let owner = self.conns[conn_id].owner;
                for c in failed {
                    match owner {
                        ConnOwner::Collector => self.collected.push((conn_id, c)),
                        ConnOwner::Cache { .. } => self.cache_inbox.push((conn_id, c)),
                    }
                }
            }
        }
    }

    /// Copies one region's bytes from one server to another on the virtual
    /// clock at the migration-stream rate. The source must stay alive for
    /// the duration; `done(world, ok)` fires at the cut point.
    pub fn start_region_copy(
        &mut self,
        from: (ServerSlot, RegionId),
        to: (ServerSlot, RegionId),
        done: Box<dyn FnOnce(&mut SimWorld, bool)>,
    ) {
        let region_size = self.servers[from.0].core.region_size();
        let dur_s = self.model.migration_seconds(region_size);
        let at = self.clock + us_to_ns(dur_s * 1e6);
        self.log.push(
            self.clock,
            format!(
                "migration-start from={}:{} to={}:{}",
                from.0, from.1 .0, to.0, to.1 .0
            ),
        );
        self.schedule_at(
            at,
            Box::new(move |w| {
                let ok = w.servers[from.0].core.mode != ServerMode::Terminated
                    && w.servers[to.0].core.mode != ServerMode::Terminated;
                if ok {
                    let pages: Vec<(u64, Vec<u8>)> = w.servers[from.0]
                        .core
                        .region(from.1)
                        .map(|r| {
                            r.materialized_pages()
                                .map(|(off, p)| (off, p.to_vec()))
                                .collect()
                        })
                        .unwrap_or_default();
                    for (off, page) in pages {
                        w.servers[to.0].core.migration_write(to.1, off, &page);
                    }
                }
                w.log.push(
                    w.clock,
                    format!(
                        "migration-{} from={}:{} to={}:{}",
                        if ok { "done" } else { "aborted" },
                        from.0,
                        from.1 .0,
                        to.0,
                        to.1 .0
                    ),
                );
                done(w, ok);
            }),
        );
    }

    /// Drains collector completions gathered so far.
    pub fn take_collected(&mut self) -> Vec<(ConnId, BatchCompletion)> {
        std::mem::take(&mut self.collected)
    }
}
