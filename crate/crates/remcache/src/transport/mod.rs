//! The queue-pair/batch transport layer shared by the simulated and socket
//! backends: request/response batch types, the SPSC rings that feed the
//! pipeline, the wire format, and the parametric network cost model.

pub mod netmodel;
pub mod ring;
pub mod wire;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::RegionId;

pub use netmodel::NetworkModel;
pub use ring::RingBuffer;

/// Access credential for one physical region, returned by Connect.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RegionToken(pub u64);

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TransportError {
    #[error("connection failed: {0}")]
    ConnectionFailed(String),
    #[error("connection lost")]
    ConnectionLost,
    #[error("server could not allocate {requested} regions")]
    AllocationFailed { requested: u32 },
    #[error("batch of {len} requests exceeds batch size {cap}")]
    BatchTooLarge { len: usize, cap: u32 },
    #[error("malformed frame: {0}")]
    Malformed(String),
    #[error("access denied for region token")]
    AccessDenied,
    #[error("request range out of region bounds")]
    OutOfBounds,
}

/// Request operation kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OpKind {
    Read,
    Write,
}

/// One read or write against a physical region.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Request {
    pub op: OpKind,
    pub region_id: RegionId,
    pub offset: u64,
    pub len: u32,
    /// Write payload; empty for reads. Length equals `len` for writes.
    pub payload: Vec<u8>,
    /// Caller-side completion correlation tag; not sent on the wire.
    pub completion_tag: u64,
}

impl Request {
    pub fn read(region_id: RegionId, offset: u64, len: u32, completion_tag: u64) -> Self {
        Request {
            op: OpKind::Read,
            region_id,
            offset,
            len,
            payload: Vec::new(),
            completion_tag,
        }
    }

    pub fn write(region_id: RegionId, offset: u64, payload: Vec<u8>, completion_tag: u64) -> Self {
        Request {
            op: OpKind::Write,
            region_id,
            offset,
            len: payload.len() as u32,
            payload,
            completion_tag,
        }
    }

    /// Bytes this request occupies in a request-batch body.
    pub fn wire_len(&self) -> usize {
        // op u8 + region u32 + offset u64 + len u32
        let mut n = 1 + 4 + 8 + 4;
        if self.op == OpKind::Write {
            n += self.payload.len();
        }
        n
    }
}

/// An ordered group of requests sent as one transfer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequestBatch {
    /// Strictly increasing per connection.
    pub batch_id: u64,
    pub requests: Vec<Request>,
}

impl RequestBatch {
    pub fn wire_body_len(&self) -> usize {
        8 + 2 + self.requests.iter().map(Request::wire_len).sum::<usize>()
    }
}

/// Per-request completion status.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RespStatus {
    Ok,
    OutOfBounds,
    AccessDenied,
}

impl RespStatus {
    pub fn code(self) -> u8 {
        match self {
            RespStatus::Ok => 0,
            RespStatus::OutOfBounds => 1,
            RespStatus::AccessDenied => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(RespStatus::Ok),
            1 => Some(RespStatus::OutOfBounds),
            2 => Some(RespStatus::AccessDenied),
            _ => None,
        }
    }
}

/// Result of one request; payload carries read data on success.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Response {
    pub status: RespStatus,
    pub payload: Vec<u8>,
}

/// Results for one request batch, in request order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResponseBatch {
    pub batch_id: u64,
    pub responses: Vec<Response>,
}

/// Outcome of posting a batch onto a queue pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PostOutcome {
    Accepted { batch_id: u64 },
    /// Queue depth exhausted; retry after polling a completion.
    Backpressured,
}

/// A completed batch delivered by poll, with transport-level failures
/// surfaced per batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BatchCompletion {
    Done(ResponseBatch),
    Failed { batch_id: u64 },
}

impl BatchCompletion {
    pub fn batch_id(&self) -> u64 {
        match self {
            BatchCompletion::Done(rb) => rb.batch_id,
            BatchCompletion::Failed { batch_id } => *batch_id,
        }
    }
}

/// Client-side queue pair bookkeeping shared by both backends: enforces the
/// queue-depth bound and releases completions in batch_id order.
#[derive(Debug)]
pub struct QueuePairState {
    pub connection_id: u64,
    queue_depth_limit: u32,
    in_flight: u32,
    next_batch_id: u64,
    next_deliver_id: u64,
    reorder: std::collections::BTreeMap<u64, BatchCompletion>,
}

impl QueuePairState {
    pub fn new(connection_id: u64, queue_depth_limit: u32) -> Self {
        QueuePairState {
            connection_id,
            queue_depth_limit,
            in_flight: 0,
            next_batch_id: 1,
            next_deliver_id: 1,
            reorder: std::collections::BTreeMap::new(),
        }
    }

    pub fn in_flight(&self) -> u32 {
        self.in_flight
    }

    pub fn queue_depth_limit(&self) -> u32 {
        self.queue_depth_limit
    }

    pub fn has_free_slot(&self) -> bool {
        self.in_flight < self.queue_depth_limit
    }

    /// Claims a queue slot and the next batch id, or reports backpressure.
    pub fn try_claim_slot(&mut self) -> Option<u64> {
        if !self.has_free_slot() {
            return None;
        }
        self.in_flight += 1;
        let id = self.next_batch_id;
        self.next_batch_id += 1;
        debug_assert!(self.in_flight <= self.queue_depth_limit);
        Some(id)
    }

    /// Records an arrived completion and returns the in-order ready prefix.
    pub fn complete(&mut self, completion: BatchCompletion) -> Vec<BatchCompletion> {
        debug_assert!(self.in_flight > 0);
        self.in_flight = self.in_flight.saturating_sub(1);
        self.reorder.insert(completion.batch_id(), completion);
        let mut ready = Vec::new();
        while let Some(c) = self.reorder.remove(&self.next_deliver_id) {
            self.next_deliver_id += 1;
            ready.push(c);
        }
        ready
    }

    /// Fails every outstanding batch, as on connection loss.
    pub fn fail_all(&mut self) -> Vec<BatchCompletion> {
        let mut out = Vec::new();
        while self.next_deliver_id < self.next_batch_id {
            if let Some(c) = self.reorder.remove(&self.next_deliver_id) {
                out.push(c);
            } else {
                out.push(BatchCompletion::Failed {
                    batch_id: self.next_deliver_id,
                });
            }
            self.next_deliver_id += 1;
        }
        self.in_flight = 0;
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn queue_depth_is_enforced() {
        let mut qp = QueuePairState::new(1, 4);
        let ids: Vec<_> = (0..4).map(|_| qp.try_claim_slot().unwrap()).collect();
        assert_eq!(ids, vec![1, 2, 3, 4]);
        assert_eq!(qp.try_claim_slot(), None);
        let ready = qp.complete(BatchCompletion::Done(ResponseBatch {
            batch_id: 1,
            responses: vec![],
        }));
        assert_eq!(ready.len(), 1);
        assert!(qp.try_claim_slot().is_some());
    }

    #[test]
    fn completions_release_in_order() {
        let mut qp = QueuePairState::new(1, 8);
        for _ in 0..3 {
            qp.try_claim_slot().unwrap();
        }
        let done = |id| {
            BatchCompletion::Done(ResponseBatch {
                batch_id: id,
                responses: vec![],
            })
        };
        assert!(qp.complete(done(2)).is_empty());
        assert!(qp.complete(done(3)).is_empty());
        let ready = qp.complete(done(1));
        assert_eq!(
            ready.iter().map(BatchCompletion::batch_id).collect::<Vec<_>>(),
            vec![1, 2, 3]
        );
    }

    #[test]
    fn connection_loss_fails_pending() {
        let mut qp = QueuePairState::new(1, 8);
        for _ in 0..3 {
            qp.try_claim_slot().unwrap();
        }
        let failed = qp.fail_all();
        assert_eq!(failed.len(), 3);
        assert!(matches!(failed[0], BatchCompletion::Failed { batch_id: 1 }));
        assert_eq!(qp.in_flight(), 0);
    }
}
