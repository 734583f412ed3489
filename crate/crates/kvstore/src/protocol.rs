//! Message payloads exchanged by the KV atoms.
//!
//! Every payload starts with a one-byte tag. Integers are big-endian,
//! names carry a `u16` length and byte strings a `u32` length.
//!
//! | tag | message  | body                                                         |
//! |-----|----------|--------------------------------------------------------------|
//! | 1   | Join     | member: name                                                 |
//! | 2   | Topology | (empty)                                                      |
//! | 3   | View     | version u64, replication u32, count u32, count × name        |
//! | 4   | Request  | correlation u64, hops u32, reply_to name, op u8, key bytes, value bytes (put only), written u16 × name |
//! | 5   | Response | correlation u64, outcome u8, bytes (value or error text)     |
//!
//! Ops: 1 put, 2 get. Outcomes: 0 ok with value, 1 ok, 2 not found,
//! 3 error.

use bytes::{Buf, BufMut, Bytes, BytesMut};
use radon_core::model::AtomName;

use crate::ring::RingView;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum KvOp {
    Put { key: Bytes, value: Bytes },
    Get { key: Bytes },
}

impl KvOp {
    pub fn key(&self) -> &Bytes {
        match self {
            KvOp::Put { key, .. } | KvOp::Get { key } => key,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KvRequest {
    pub op: KvOp,
    pub reply_to: AtomName,
    pub correlation_id: u64,
    pub hops: u32,
    /// Replicas already holding a put, in chain order.
    pub written: Vec<AtomName>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Ok(Option<Bytes>),
    NotFound,
    Error(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KvResponse {
    pub correlation_id: u64,
    pub outcome: Outcome,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum KvMessage {
    Join(AtomName),
    Topology,
    View(RingView),
    Request(KvRequest),
    Response(KvResponse),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DecodeError {
    #[error("payload truncated")]
    Truncated,
    #[error("unknown tag {0}")]
    UnknownTag(u8),
    #[error("invalid field: {0}")]
    Invalid(String),
}

/// Error text used when a request exceeds its hop budget.
pub const ROUTING_LOOP: &str = "routing loop";

fn put_name(out: &mut BytesMut, name: &AtomName) {
    out.put_u16(name.as_str().len() as u16);
    out.put_slice(name.as_str().as_bytes());
}

fn put_bytes(out: &mut BytesMut, bytes: &[u8]) {
    out.put_u32(bytes.len() as u32);
    out.put_slice(bytes);
}

fn need(buf: &Bytes, n: usize) -> Result<(), DecodeError> {
    if buf.remaining() < n {
        Err(DecodeError::Truncated)
    } else {
        Ok(())
    }
}

fn get_u8(buf: &mut Bytes) -> Result<u8, DecodeError> {
    need(buf, 1)?;
    Ok(buf.get_u8())
}

fn get_u16(buf: &mut Bytes) -> Result<u16, DecodeError> {
    need(buf, 2)?;
    Ok(buf.get_u16())
}

fn get_u32(buf: &mut Bytes) -> Result<u32, DecodeError> {
    need(buf, 4)?;
    Ok(buf.get_u32())
}

fn get_u64(buf: &mut Bytes) -> Result<u64, DecodeError> {
    need(buf, 8)?;
    Ok(buf.get_u64())
}

fn get_name(buf: &mut Bytes) -> Result<AtomName, DecodeError> {
    let len = get_u16(buf)? as usize;
    need(buf, len)?;
    let raw = buf.split_to(len);
    let text = std::str::from_utf8(&raw).map_err(|e| DecodeError::Invalid(e.to_string()))?;
    AtomName::new(text).map_err(|e| DecodeError::Invalid(e.to_string()))
}

fn get_bytes(buf: &mut Bytes) -> Result<Bytes, DecodeError> {
    let len = get_u32(buf)? as usize;
    need(buf, len)?;
    Ok(buf.split_to(len))
}

impl KvMessage {
    pub fn encode(&self) -> Bytes {
        let mut out = BytesMut::with_capacity(64);
        match self {
            KvMessage::Join(member) => {
                out.put_u8(1);
                put_name(&mut out, member);
            }
            KvMessage::Topology => out.put_u8(2),
            KvMessage::View(view) => {
                out.put_u8(3);
                out.put_u64(view.version());
                out.put_u32(view.replication() as u32);
                out.put_u32(view.len() as u32);
                for member in view.members() {
                    put_name(&mut out, member);
                }
            }
            KvMessage::Request(req) => {
                out.put_u8(4);
                out.put_u64(req.correlation_id);
                out.put_u32(req.hops);
                put_name(&mut out, &req.reply_to);
                match &req.op {
                    KvOp::Put { key, value } => {
                        out.put_u8(1);
                        put_bytes(&mut out, key);
                        put_bytes(&mut out, value);
                    }
                    KvOp::Get { key } => {
                        out.put_u8(2);
                        put_bytes(&mut out, key);
                    }
                }
                out.put_u16(req.written.len() as u16);
                for member in &req.written {
                    put_name(&mut out, member);
                }
            }
            KvMessage::Response(resp) => {
                out.put_u8(5);
                out.put_u64(resp.correlation_id);
                match &resp.outcome {
                    Outcome::Ok(Some(value)) => {
                        out.put_u8(0);
                        put_bytes(&mut out, value);
                    }
                    Outcome::Ok(None) => {
                        out.put_u8(1);
                        put_bytes(&mut out, b"");
                    }
                    Outcome::NotFound => {
                        out.put_u8(2);
                        put_bytes(&mut out, b"");
                    }
                    Outcome::Error(text) => {
                        out.put_u8(3);
                        put_bytes(&mut out, text.as_bytes());
                    }
                }
            }
        }
        out.freeze()
    }

    pub fn decode(mut buf: Bytes) -> Result<Self, DecodeError> {
        let message = match get_u8(&mut buf)? {
            1 => KvMessage::Join(get_name(&mut buf)?),
            2 => KvMessage::Topology,
            3 => {
                let version = get_u64(&mut buf)?;
                let replication = get_u32(&mut buf)? as usize;
                let count = get_u32(&mut buf)? as usize;
                let mut members = Vec::with_capacity(count.min(4096));
                for _ in 0..count {
                    members.push(get_name(&mut buf)?);
                }
                let view = RingView::from_parts(version, replication, members)
                    .map_err(|e| DecodeError::Invalid(e.to_string()))?;
                KvMessage::View(view)
            }
            4 => {
                let correlation_id = get_u64(&mut buf)?;
                let hops = get_u32(&mut buf)?;
                let reply_to = get_name(&mut buf)?;
                let op = match get_u8(&mut buf)? {
                    1 => {
                        let key = get_bytes(&mut buf)?;
                        let value = get_bytes(&mut buf)?;
                        KvOp::Put { key, value }
                    }
                    2 => KvOp::Get {
                        key: get_bytes(&mut buf)?,
                    },
                    other => return Err(DecodeError::Invalid(format!("op {other}"))),
                };
                let count = get_u16(&mut buf)? as usize;
                let mut written = Vec::with_capacity(count);
                for _ in 0..count {
                    written.push(get_name(&mut buf)?);
                }
                KvMessage::Request(KvRequest {
                    op,
                    reply_to,
                    correlation_id,
                    hops,
                    written,
                })
            }
            5 => {
                let correlation_id = get_u64(&mut buf)?;
                let kind = get_u8(&mut buf)?;
                let body = get_bytes(&mut buf)?;
                let outcome = match kind {
                    0 => Outcome::Ok(Some(body)),
                    1 => Outcome::Ok(None),
                    2 => Outcome::NotFound,
                    3 => Outcome::Error(String::from_utf8_lossy(&body).into_owned()),
                    other => return Err(DecodeError::Invalid(format!("outcome {other}"))),
                };
                KvMessage::Response(KvResponse {
                    correlation_id,
                    outcome,
                })
            }
            tag => return Err(DecodeError::UnknownTag(tag)),
        };
        if buf.has_remaining() {
            return Err(DecodeError::Invalid("trailing bytes".into()));
        }
        Ok(message)
    }
}
