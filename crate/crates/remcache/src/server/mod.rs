//! The cache server agent: allocates and registers memory regions on
//! Connect, executes request batches against local regions, and serves
//! migration reads.

pub mod socket;
mod store;

use std::collections::BTreeMap;

use crate::transport::{
    OpKind, RegionToken, RequestBatch, RespStatus, Response, ResponseBatch, TransportError,
};
use crate::types::{CacheId, RegionId};

pub use store::SparseBytes;

/// One registered memory region. Contents are mutated only by write
/// requests and migration ingestion; fresh regions read as zeros.
#[derive(Debug)]
pub struct PhysicalRegion {
    pub region_id: RegionId,
    pub token: RegionToken,
    bytes: SparseBytes,
}

impl PhysicalRegion {
    pub fn len(&self) -> u64 {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.len() == 0
    }

    pub fn read(&self, offset: u64, len: u64) -> Option<Vec<u8>> {
        self.bytes.read(offset, len)
    }

    pub fn write(&mut self, offset: u64, data: &[u8]) -> bool {
        self.bytes.write(offset, data)
    }

    pub fn checksum(&self) -> u64 {
        self.bytes.checksum()
    }

    /// Raw page map, used by migration to copy only materialized bytes.
    pub fn materialized_pages(&self) -> impl Iterator<Item = (u64, &[u8])> {
        self.bytes.pages()
    }
}

/// Server lifecycle: serving normally, draining during migration (reads
/// continue, no new allocations), or terminated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ServerMode {
    Serving,
    Draining,
    Terminated,
}

/// Memory-side state of one cache server agent. Transport backends wrap
/// this in their own threading; all operations here are synchronous.
#[derive(Debug)]
pub struct ServerCore {
    region_size: u64,
    memory_limit: u64,
    next_region_id: u32,
    next_token: u64,
    pub mode: ServerMode,
    regions: BTreeMap<RegionId, PhysicalRegion>,
    /// Regions grouped by owning cache, in allocation order.
    by_cache: BTreeMap<CacheId, Vec<RegionId>>,
}

impl ServerCore {
    pub fn new(memory_limit: u64, region_size: u64) -> Self {
        ServerCore {
            region_size,
            memory_limit,
            next_region_id: 0,
            next_token: 1,
            mode: ServerMode::Serving,
            regions: BTreeMap::new(),
            by_cache: BTreeMap::new(),
        }
    }

    pub fn region_size(&self) -> u64 {
        self.region_size
    }

    pub fn allocated_regions(&self) -> usize {
        self.regions.len()
    }

    pub fn free_regions(&self) -> u64 {
        self.memory_limit / self.region_size - self.regions.len() as u64
    }

    /// Regions already registered for a cache, in allocation order.
    pub fn regions_of(&self, cache: CacheId) -> Vec<(RegionId, RegionToken)> {
        self.by_cache
            .get(&cache)
            .map(|ids| {
                ids.iter()
                    .map(|id| (*id, self.regions[id].token))
                    .collect()
            })
            .unwrap_or_default()
    }

    /// Handles a Connect: ensures the cache has `region_count` regions
    /// allocated here and returns their tokens. Repeat connections attach
    /// to the existing regions; a higher count allocates the difference.
    /// Allocation failures have no effect.
    pub fn handle_connect(
        &mut self,
        cache: CacheId,
        region_count: u32,
    ) -> Result<Vec<(RegionId, RegionToken)>, TransportError> {
        if self.mode != ServerMode::Serving {
            return Err(TransportError::ConnectionFailed(
                "server not accepting allocations".into(),
            ));
        }
        if region_count == 0 {
            return Err(TransportError::AllocationFailed { requested: 0 });
        }
        let existing = self.by_cache.get(&cache).map_or(0, Vec::len) as u32;
        let missing = region_count.saturating_sub(existing) as u64;
        if missing > self.free_regions() {
            return Err(TransportError::AllocationFailed {
                requested: region_count,
            });
        }
        for _ in 0..missing {
            let region_id = RegionId(self.next_region_id);
            self.next_region_id += 1;
            let token = RegionToken(self.next_token);
            self.next_token += 1;
            self.regions.insert(
                region_id,
                PhysicalRegion {
                    region_id,
                    token,
                    bytes: SparseBytes::new(self.region_size),
                },
            );
            self.by_cache.entry(cache).or_default().push(region_id);
        }
        let ids = &self.by_cache[&cache];
        Ok(ids[..region_count as usize]
            .iter()
            .map(|id| (*id, self.regions[id].token))
            .collect())
    }

    /// Releases every region owned by a cache.
    pub fn release_cache(&mut self, cache: CacheId) {
        if let Some(ids) = self.by_cache.remove(&cache) {
            for id in ids {
                self.regions.remove(&id);
            }
        }
    }

    /// Releases specific regions of a cache (shrink path).
    pub fn release_regions(&mut self, cache: CacheId, ids: &[RegionId]) {
        if let Some(owned) = self.by_cache.get_mut(&cache) {
            owned.retain(|id| !ids.contains(id));
        }
        for id in ids {
            self.regions.remove(id);
        }
    }

    pub fn region(&self, id: RegionId) -> Option<&PhysicalRegion> {
        self.regions.get(&id)
    }

    pub fn region_mut(&mut self, id: RegionId) -> Option<&mut PhysicalRegion> {
        self.regions.get_mut(&id)
    }

    fn check_token(&self, id: RegionId, token: RegionToken) -> Result<&PhysicalRegion, RespStatus> {
        match self.regions.get(&id) {
            Some(r) if r.token == token => Ok(r),
            _ => Err(RespStatus::AccessDenied),
        }
    }

    /// Executes one request against a region, atomically.
    pub fn execute_request(
        &mut self,
        op: OpKind,
        region_id: RegionId,
        token: RegionToken,
        offset: u64,
        len: u32,
        payload: &[u8],
    ) -> Response {
        if let Err(status) = self.check_token(region_id, token) {
            return Response {
                status,
                payload: Vec::new(),
            };
        }
        let region = self.regions.get_mut(&region_id).unwrap();
        match op {
            OpKind::Read => match region.read(offset, len as u64) {
                Some(payload) => Response {
                    status: RespStatus::Ok,
                    payload,
                },
                None => Response {
                    status: RespStatus::OutOfBounds,
                    payload: Vec::new(),
                },
            },
            OpKind::Write => {
                if region.write(offset, payload) {
                    Response {
                        status: RespStatus::Ok,
                        payload: Vec::new(),
                    }
                } else {
                    Response {
                        status: RespStatus::OutOfBounds,
                        payload: Vec::new(),
                    }
                }
            }
        }
    }

    /// Applies a batch's requests in order against local regions. Reads in
    /// the batch observe earlier writes from the same batch; a failing
    /// request does not disturb the others. Token validation uses the
    /// per-request tokens supplied alongside the batch.
    pub fn execute_batch(
        &mut self,
        batch: &RequestBatch,
        tokens: &dyn Fn(RegionId) -> Option<RegionToken>,
    ) -> ResponseBatch {
        let responses = batch
            .requests
            .iter()
            .map(|req| {
                let token = match tokens(req.region_id) {
                    Some(t) => t,
                    None => {
                        return Response {
                            status: RespStatus::AccessDenied,
                            payload: Vec::new(),
                        }
                    }
                };
                self.execute_request(
                    req.op,
                    req.region_id,
                    token,
                    req.offset,
                    req.len,
                    &req.payload,
                )
            })
            .collect();
        ResponseBatch {
            batch_id: batch.batch_id,
            responses,
        }
    }

    /// Serves one migration read: a bounded one-sided read of region bytes,
    /// available while serving or draining.
    pub fn migration_read(
        &self,
        region_id: RegionId,
        offset: u64,
        len: u32,
    ) -> Result<Vec<u8>, RespStatus> {
        if self.mode == ServerMode::Terminated {
            return Err(RespStatus::AccessDenied);
        }
        let region = self.regions.get(&region_id).ok_or(RespStatus::AccessDenied)?;
        region.read(offset, len as u64).ok_or(RespStatus::OutOfBounds)
    }

    /// Ingests migrated bytes into a destination region.
    pub fn migration_write(&mut self, region_id: RegionId, offset: u64, data: &[u8]) -> bool {
        match self.regions.get_mut(&region_id) {
            Some(r) => r.write(offset, data),
            None => false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::Request;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    const RSZ: u64 = 1 << 16;

    fn server(regions: u64) -> ServerCore {
        ServerCore::new(regions * RSZ, RSZ)
    }

    #[test]
    fn connect_allocates_and_accounts() {
        let mut s = server(4);
        let tokens = s.handle_connect(CacheId(1), 3).unwrap();
        assert_eq!(tokens.len(), 3);
        assert_eq!(s.free_regions(), 1);

        // attach semantics: same cache, same regions
        let again = s.handle_connect(CacheId(1), 3).unwrap();
        assert_eq!(again, tokens);
        assert_eq!(s.free_regions(), 1);
    }

    #[test]
    fn failed_allocation_is_atomic() {
        let mut s = server(4);
        let err = s.handle_connect(CacheId(1), 5).unwrap_err();
        assert_eq!(err, TransportError::AllocationFailed { requested: 5 });
        assert_eq!(s.free_regions(), 4);
        assert!(s.handle_connect(CacheId(1), 0).is_err());
    }

    #[test]
    fn fresh_regions_read_zero() {
        let mut s = server(1);
        let tokens = s.handle_connect(CacheId(1), 1).unwrap();
        let (rid, tok) = tokens[0];
        let resp = s.execute_request(OpKind::Read, rid, tok, 100, 16, &[]);
        assert_eq!(resp.status, RespStatus::Ok);
        assert_eq!(resp.payload, vec![0u8; 16]);
    }

    #[test]
    fn batch_read_after_write_and_bounds() {
        let mut s = server(1);
        let tokens = s.handle_connect(CacheId(1), 1).unwrap();
        let (rid, tok) = tokens[0];
        let batch = RequestBatch {
            batch_id: 1,
            requests: vec![
                Request::write(rid, 0, b"abcd".to_vec(), 0),
                Request::read(rid, 0, 4, 1),
                Request::read(rid, RSZ - 1, 2, 2),
            ],
        };
        let resp = s.execute_batch(&batch, &|_| Some(tok));
        assert_eq!(resp.responses[0].status, RespStatus::Ok);
        assert_eq!(resp.responses[1].payload, b"abcd");
        assert_eq!(resp.responses[2].status, RespStatus::OutOfBounds);
    }

    #[test]
    fn bad_token_denied() {
        let mut s = server(1);
        let tokens = s.handle_connect(CacheId(1), 1).unwrap();
        let (rid, tok) = tokens[0];
        let resp = s.execute_request(OpKind::Read, rid, RegionToken(tok.0 + 1), 0, 4, &[]);
        assert_eq!(resp.status, RespStatus::AccessDenied);
    }

    // Randomized batch sequences replayed against a flat reference buffer.
    #[test]
    fn batch_sequence_matches_sequential_replay() {
        let mut s = server(1);
        let tokens = s.handle_connect(CacheId(1), 1).unwrap();
        let (rid, tok) = tokens[0];
        let mut reference = vec![0u8; RSZ as usize];
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for batch_id in 1..=50u64 {
            let requests: Vec<Request> = (0..rng.gen_range(1..8))
                .map(|i| {
                    let offset = rng.gen_range(0..RSZ - 64);
                    if rng.gen_bool(0.5) {
                        let len = rng.gen_range(1..=64usize);
                        let data: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
                        reference[offset as usize..offset as usize + len].copy_from_slice(&data);
                        Request::write(rid, offset, data, i)
                    } else {
                        Request::read(rid, offset, rng.gen_range(1..=64), i)
                    }
                })
                .collect();
            s.execute_batch(&RequestBatch { batch_id, requests }, &|_| Some(tok));
        }
        let got = s.region(rid).unwrap().read(0, RSZ).unwrap();
        assert_eq!(got, reference);
    }

    #[test]
    fn migration_read_respects_mode() {
        let mut s = server(1);
        let tokens = s.handle_connect(CacheId(1), 1).unwrap();
        let (rid, tok) = tokens[0];
        s.execute_request(OpKind::Write, rid, tok, 10, 3, b"xyz");
        s.mode = ServerMode::Draining;
        assert_eq!(s.migration_read(rid, 10, 3).unwrap(), b"xyz");
        // draining refuses new allocations
        assert!(s.handle_connect(CacheId(2), 1).is_err());
        s.mode = ServerMode::Terminated;
        assert!(s.migration_read(rid, 10, 3).is_err());
    }
}
