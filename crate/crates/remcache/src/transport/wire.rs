//! Length-prefixed wire format shared by the socket backend and any
//! out-of-process peer. All integers are little-endian.
//!
//! Frame header: magic u32, version u8, msg_type u8, body_len u32.
//!
//! Bodies:
//! - Connect: cache_id u64, region_count u16, c u16, s u16, b u16, q u16
//! - ConnectAck: region_count u16; per region: region_id u32, token u64
//! - RequestBatch: batch_id u64, count u16; per request: op u8 (0 read,
//!   1 write), region_id u32, offset u64, len u32, payload (writes only)
//! - ResponseBatch: batch_id u64, count u16; per response: status u8
//!   (0 ok, 1 out-of-bounds, 2 access-denied), payload (successful reads,
//!   length echoed from the request)
//! - MigrationRead request: region_id u32, offset u64, len u32; the reply
//!   reuses the same msg_type with body: status u8, payload
//! - Terminate: empty body

use crate::transport::{
    OpKind, Request, RequestBatch, RespStatus, Response, ResponseBatch, TransportError,
};
use crate::types::{CacheId, RegionId};

use super::RegionToken;

pub const MAGIC: u32 = 0x5245_5459;
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 4 + 1 + 1 + 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum MsgType {
    Connect = 1,
    ConnectAck = 2,
    RequestBatch = 3,
    ResponseBatch = 4,
    MigrationRead = 5,
    Terminate = 6,
    // Manager RPC shares the frame header; the spec below 7 is fixed,
    // manager bodies are JSON.
    ManagerRequest = 7,
    ManagerResponse = 8,
}

impl MsgType {
    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            1 => MsgType::Connect,
            2 => MsgType::ConnectAck,
            3 => MsgType::RequestBatch,
            4 => MsgType::ResponseBatch,
            5 => MsgType::MigrationRead,
            6 => MsgType::Terminate,
            7 => MsgType::ManagerRequest,
            8 => MsgType::ManagerResponse,
            _ => return None,
        })
    }
}

/// Parameters carried by a Connect message.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConnectMsg {
    pub cache_id: CacheId,
    pub region_count: u16,
    pub client_threads: u16,
    pub server_threads: u16,
    pub batch_size: u16,
    pub queue_depth: u16,
}

/// A migration read request against one region of the old server.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MigrationReadMsg {
    pub region_id: RegionId,
    pub offset: u64,
    pub len: u32,
}

pub fn encode_frame(msg_type: MsgType, body: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + body.len());
    out.extend_from_slice(&MAGIC.to_le_bytes());
    out.push(VERSION);
    out.push(msg_type as u8);
    out.extend_from_slice(&(body.len() as u32).to_le_bytes());
    out.extend_from_slice(body);
    out
}

/// Parses a frame header, returning the message type and body length.
pub fn decode_header(header: &[u8; HEADER_LEN]) -> Result<(MsgType, usize), TransportError> {
    let magic = u32::from_le_bytes(header[0..4].try_into().unwrap());
    if magic != MAGIC {
        return Err(TransportError::Malformed(format!("bad magic {magic:#x}")));
    }
    if header[4] != VERSION {
        return Err(TransportError::Malformed(format!(
            "unsupported version {}",
            header[4]
        )));
    }
    let msg_type = MsgType::from_code(header[5])
        .ok_or_else(|| TransportError::Malformed(format!("unknown msg_type {}", header[5])))?;
    let body_len = u32::from_le_bytes(header[6..10].try_into().unwrap()) as usize;
    Ok((msg_type, body_len))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], TransportError> {
        if self.pos + n > self.buf.len() {
            return Err(TransportError::Malformed("truncated body".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, TransportError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, TransportError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, TransportError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, TransportError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn finish(&self) -> Result<(), TransportError> {
        if self.pos != self.buf.len() {
            return Err(TransportError::Malformed("trailing bytes".into()));
        }
        Ok(())
    }
}

pub fn encode_connect(msg: &ConnectMsg) -> Vec<u8> {
    let mut b = Vec::with_capacity(18);
    b.extend_from_slice(&msg.cache_id.0.to_le_bytes());
    b.extend_from_slice(&msg.region_count.to_le_bytes());
    b.extend_from_slice(&msg.client_threads.to_le_bytes());
    b.extend_from_slice(&msg.server_threads.to_le_bytes());
    b.extend_from_slice(&msg.batch_size.to_le_bytes());
    b.extend_from_slice(&msg.queue_depth.to_le_bytes());
    b
}

pub fn decode_connect(body: &[u8]) -> Result<ConnectMsg, TransportError> {
    let mut r = Reader::new(body);
    let msg = ConnectMsg {
        cache_id: CacheId(r.u64()?),
        region_count: r.u16()?,
        client_threads: r.u16()?,
        server_threads: r.u16()?,
        batch_size: r.u16()?,
        queue_depth: r.u16()?,
    };
    r.finish()?;
    Ok(msg)
}

pub fn encode_connect_ack(regions: &[(RegionId, RegionToken)]) -> Vec<u8> {
    let mut b = Vec::with_capacity(2 + regions.len() * 12);
    b.extend_from_slice(&(regions.len() as u16).to_le_bytes());
    for (region_id, token) in regions {
        b.extend_from_slice(&region_id.0.to_le_bytes());
        b.extend_from_slice(&token.0.to_le_bytes());
    }
    b
}

pub fn decode_connect_ack(body: &[u8]) -> Result<Vec<(RegionId, RegionToken)>, TransportError> {
    let mut r = Reader::new(body);
    let count = r.u16()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        out.push((RegionId(r.u32()?), RegionToken(r.u64()?)));
    }
    r.finish()?;
    Ok(out)
}

pub fn encode_request_batch(batch: &RequestBatch) -> Vec<u8> {
    let mut b = Vec::with_capacity(batch.wire_body_len());
    b.extend_from_slice(&batch.batch_id.to_le_bytes());
    b.extend_from_slice(&(batch.requests.len() as u16).to_le_bytes());
    for req in &batch.requests {
        b.push(match req.op {
            OpKind::Read => 0,
            OpKind::Write => 1,
        });
        b.extend_from_slice(&req.region_id.0.to_le_bytes());
        b.extend_from_slice(&req.offset.to_le_bytes());
        b.extend_from_slice(&req.len.to_le_bytes());
        if req.op == OpKind::Write {
            debug_assert_eq!(req.payload.len(), req.len as usize);
            b.extend_from_slice(&req.payload);
        }
    }
    b
}

pub fn decode_request_batch(body: &[u8]) -> Result<RequestBatch, TransportError> {
    let mut r = Reader::new(body);
    let batch_id = r.u64()?;
    let count = r.u16()? as usize;
    let mut requests = Vec::with_capacity(count);
    for _ in 0..count {
        let op = match r.u8()? {
            0 => OpKind::Read,
            1 => OpKind::Write,
            other => {
                return Err(TransportError::Malformed(format!("unknown op {other}")));
            }
        };
        let region_id = RegionId(r.u32()?);
        let offset = r.u64()?;
        let len = r.u32()?;
        let payload = if op == OpKind::Write {
            r.take(len as usize)?.to_vec()
        } else {
            Vec::new()
        };
        requests.push(Request {
            op,
            region_id,
            offset,
            len,
            payload,
            completion_tag: 0,
        });
    }
    r.finish()?;
    Ok(RequestBatch { batch_id, requests })
}

pub fn encode_response_batch(batch: &ResponseBatch) -> Vec<u8> {
    let mut b = Vec::new();
    b.extend_from_slice(&batch.batch_id.to_le_bytes());
    b.extend_from_slice(&(batch.responses.len() as u16).to_le_bytes());
    for resp in &batch.responses {
        b.push(resp.status.code());
        b.extend_from_slice(&resp.payload);
    }
    b
}

/// Decodes a response batch. Read payload lengths are echoed from the
/// request, so the caller supplies the `(op, len)` shape of the batch it
/// posted; payloads are present only for successful reads.
pub fn decode_response_batch(
    body: &[u8],
    shape: &[(OpKind, u32)],
) -> Result<ResponseBatch, TransportError> {
    let mut r = Reader::new(body);
    let batch_id = r.u64()?;
    let count = r.u16()? as usize;
    if count != shape.len() {
        return Err(TransportError::Malformed(format!(
            "response count {count} does not match request count {}",
            shape.len()
        )));
    }
    let mut responses = Vec::with_capacity(count);
    for &(op, len) in shape {
        let status = RespStatus::from_code(r.u8()?)
            .ok_or_else(|| TransportError::Malformed("unknown status".into()))?;
        let payload = if op == OpKind::Read && status == RespStatus::Ok {
            r.take(len as usize)?.to_vec()
        } else {
            Vec::new()
        };
        responses.push(Response { status, payload });
    }
    r.finish()?;
    Ok(ResponseBatch { batch_id, responses })
}

pub fn encode_migration_read(msg: &MigrationReadMsg) -> Vec<u8> {
    let mut b = Vec::with_capacity(16);
    b.extend_from_slice(&msg.region_id.0.to_le_bytes());
    b.extend_from_slice(&msg.offset.to_le_bytes());
    b.extend_from_slice(&msg.len.to_le_bytes());
    b
}

pub fn decode_migration_read(body: &[u8]) -> Result<MigrationReadMsg, TransportError> {
    let mut r = Reader::new(body);
    let msg = MigrationReadMsg {
        region_id: RegionId(r.u32()?),
        offset: r.u64()?,
        len: r.u32()?,
    };
    r.finish()?;
    Ok(msg)
}

pub fn encode_migration_reply(status: RespStatus, payload: &[u8]) -> Vec<u8> {
    let mut b = Vec::with_capacity(1 + payload.len());
    b.push(status.code());
    b.extend_from_slice(payload);
    b
}

pub fn decode_migration_reply(body: &[u8]) -> Result<(RespStatus, Vec<u8>), TransportError> {
    if body.is_empty() {
        return Err(TransportError::Malformed("empty migration reply".into()));
    }
    let status = RespStatus::from_code(body[0])
        .ok_or_else(|| TransportError::Malformed("unknown status".into()))?;
    Ok((status, body[1..].to_vec()))
}

/// Reads one complete frame from a stream.
pub fn read_frame(stream: &mut impl std::io::Read) -> std::io::Result<(MsgType, Vec<u8>)> {
    let mut header = [0u8; HEADER_LEN];
    stream.read_exact(&mut header)?;
    let (msg_type, body_len) = decode_header(&header)
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()))?;
    let mut body = vec![0u8; body_len];
    stream.read_exact(&mut body)?;
    Ok((msg_type, body))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let frame = encode_frame(MsgType::Terminate, &[]);
        assert_eq!(frame.len(), HEADER_LEN);
        assert_eq!(&frame[0..4], &[0x59, 0x54, 0x45, 0x52]);
        assert_eq!(frame[4], 1);
        assert_eq!(frame[5], 6);
        let (ty, len) = decode_header(&frame[..HEADER_LEN].try_into().unwrap()).unwrap();
        assert_eq!(ty, MsgType::Terminate);
        assert_eq!(len, 0);
    }

    #[test]
    fn rejects_bad_magic() {
        let mut frame = encode_frame(MsgType::Connect, &[]);
        frame[0] ^= 0xff;
        let header: [u8; HEADER_LEN] = frame[..HEADER_LEN].try_into().unwrap();
        assert!(decode_header(&header).is_err());
    }

    #[test]
    fn connect_round_trip() {
        let msg = ConnectMsg {
            cache_id: CacheId(77),
            region_count: 7,
            client_threads: 4,
            server_threads: 2,
            batch_size: 64,
            queue_depth: 8,
        };
        assert_eq!(decode_connect(&encode_connect(&msg)).unwrap(), msg);
    }

    fn arb_request() -> impl Strategy<Value = Request> {
        (
            any::<bool>(),
            0u32..1000,
            0u64..(1 << 20),
            proptest::collection::vec(any::<u8>(), 1..64),
        )
            .prop_map(|(is_write, region, offset, payload)| {
                if is_write {
                    Request::write(RegionId(region), offset, payload, 0)
                } else {
                    Request::read(RegionId(region), offset, payload.len() as u32, 0)
                }
            })
    }

    proptest! {
        // Wire round-trip is the identity on well-formed batches.
        #[test]
        fn request_batch_round_trip(
            batch_id in 1u64..u64::MAX,
            reqs in proptest::collection::vec(arb_request(), 0..20)
        ) {
            let batch = RequestBatch { batch_id, requests: reqs };
            let decoded = decode_request_batch(&encode_request_batch(&batch)).unwrap();
            prop_assert_eq!(decoded.batch_id, batch.batch_id);
            prop_assert_eq!(decoded.requests.len(), batch.requests.len());
            for (d, o) in decoded.requests.iter().zip(&batch.requests) {
                prop_assert_eq!(d.op, o.op);
                prop_assert_eq!(d.region_id, o.region_id);
                prop_assert_eq!(d.offset, o.offset);
                prop_assert_eq!(d.len, o.len);
                prop_assert_eq!(&d.payload, &o.payload);
            }
        }

        #[test]
        fn response_batch_round_trip(
            batch_id in 1u64..u64::MAX,
            shape in proptest::collection::vec((any::<bool>(), 1u32..64), 0..20)
        ) {
            let shape: Vec<(OpKind, u32)> = shape
                .into_iter()
                .map(|(w, len)| (if w { OpKind::Write } else { OpKind::Read }, len))
                .collect();
            let responses: Vec<Response> = shape
                .iter()
                .map(|&(op, len)| Response {
                    status: RespStatus::Ok,
                    payload: if op == OpKind::Read {
                        vec![0xab; len as usize]
                    } else {
                        Vec::new()
                    },
                })
                .collect();
            let batch = ResponseBatch { batch_id, responses };
            let decoded =
                decode_response_batch(&encode_response_batch(&batch), &shape).unwrap();
            prop_assert_eq!(decoded, batch);
        }
    }

    #[test]
    fn failed_read_carries_no_payload() {
        let batch = ResponseBatch {
            batch_id: 3,
            responses: vec![Response {
                status: RespStatus::OutOfBounds,
                payload: Vec::new(),
            }],
        };
        let shape = [(OpKind::Read, 16u32)];
        let decoded = decode_response_batch(&encode_response_batch(&batch), &shape).unwrap();
        assert_eq!(decoded.responses[0].status, RespStatus::OutOfBounds);
        assert!(decoded.responses[0].payload.is_empty());
    }

    #[test]
    fn migration_round_trip() {
        let msg = MigrationReadMsg {
            region_id: RegionId(5),
            offset: 4096,
            len: 1024,
        };
        assert_eq!(decode_migration_read(&encode_migration_read(&msg)).unwrap(), msg);
        let (status, payload) =
            decode_migration_reply(&encode_migration_reply(RespStatus::Ok, b"abc")).unwrap();
        assert_eq!(status, RespStatus::Ok);
        assert_eq!(payload, b"abc");
    }
}
