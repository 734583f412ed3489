//! Wire frames.
//!
//! Every frame is `[u32 length][u8 kind][body]`, big-endian, where `length`
//! counts the kind byte and the body. Body fields use these encodings:
//!
//! * name: `u8` length + UTF-8 bytes (atom names, aliases, node ids, tags)
//! * text: `u32` length + UTF-8 bytes
//! * bytes: `u32` length + raw bytes
//! * integers: fixed width, big-endian
//!
//! | kind | frame          | body |
//! |------|----------------|------|
//! | 1    | Hello          | `u16 version, u8 role, name node_id, u16 n, n × name tag` |
//! | 2    | Register       | `name, name node, u64 incarnation` |
//! | 3    | Deregister     | `name, name node, u64 incarnation` |
//! | 4    | Envelope       | `name target, u64 incarnation, name sender, u8 ordering, selector, u8 has_corr, [u128 corr], bytes payload` |
//! | 5    | SpawnRequest   | `u64 request_id, text configuration_document` |
//! | 6    | SpawnReply     | `u64 request_id, u8 ok, text message` |
//! | 7    | Ping           | `u64 nonce, u8 is_reply` |
//! | 8    | AliasDelta     | `u8 op (1 add, 0 remove), name alias, name member` |
//! | 9    | Refuse         | `text reason` |
//!
//! A selector is `u8 tag` followed by `name` (0 exact, 1 alias) or by
//! `u16 n, n × name` (2 name set).

use bytes::{Buf, BufMut, Bytes, BytesMut};

use crate::messaging::RemoteDelivery;
use crate::model::{Alias, AtomName, DestinationSelector, Envelope, NodeId, Ordering, MAX_PAYLOAD};
use crate::naming::{NameRecord, RegistryDelta};

pub const PROTOCOL_VERSION: u16 = 1;
pub const MAX_FRAME: usize = MAX_PAYLOAD + 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Peer,
    Client,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Frame {
    Hello {
        version: u16,
        role: Role,
        node_id: NodeId,
        tags: Vec<String>,
    },
    Register(NameRecord),
    Deregister(NameRecord),
    Envelope(RemoteDelivery),
    SpawnRequest {
        request_id: u64,
        document: String,
    },
    SpawnReply {
        request_id: u64,
        ok: bool,
        message: String,
    },
    Ping {
        nonce: u64,
        reply: bool,
    },
    Alias {
        add: bool,
        alias: Alias,
        member: AtomName,
    },
    Refuse {
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FrameError {
    #[error("frame of {0} bytes exceeds the limit")]
    TooLarge(usize),
    #[error("unknown frame kind {0}")]
    UnknownKind(u8),
    #[error("truncated frame body")]
    Truncated,
    #[error("malformed frame: {0}")]
    Malformed(String),
}

impl From<RegistryDelta> for Frame {
    fn from(delta: RegistryDelta) -> Self {
        match delta {
            RegistryDelta::Register(r) => Frame::Register(r),
            RegistryDelta::Deregister(r) => Frame::Deregister(r),
            RegistryDelta::AliasAdd { alias, member } => Frame::Alias {
                add: true,
                alias,
                member,
            },
            RegistryDelta::AliasRemove { alias, member } => Frame::Alias {
                add: false,
                alias,
                member,
            },
        }
    }
}

impl Frame {
    fn kind(&self) -> u8 {
        match self {
            Frame::Hello { .. } => 1,
            Frame::Register(_) => 2,
            Frame::Deregister(_) => 3,
            Frame::Envelope(_) => 4,
            Frame::SpawnRequest { .. } => 5,
            Frame::SpawnReply { .. } => 6,
            Frame::Ping { .. } => 7,
            Frame::Alias { .. } => 8,
            Frame::Refuse { .. } => 9,
        }
    }

    /// Registry delta carried by this frame, if any.
    pub fn into_delta(self) -> Result<RegistryDelta, Frame> {
        match self {
            Frame::Register(r) => Ok(RegistryDelta::Register(r)),
            Frame::Deregister(r) => Ok(RegistryDelta::Deregister(r)),
            Frame::Alias { add: true, alias, member } => Ok(RegistryDelta::AliasAdd { alias, member }),
            Frame::Alias { add: false, alias, member } => {
                Ok(RegistryDelta::AliasRemove { alias, member })
            }
            other => Err(other),
        }
    }

    /// Appends the framed encoding to `out`.
    pub fn encode(&self, out: &mut BytesMut) {
        let start = out.len();
        out.put_u32(0);
        out.put_u8(self.kind());
        match self {
            Frame::Hello {
                version,
                role,
                node_id,
                tags,
            } => {
                out.put_u16(*version);
                out.put_u8(match role {
                    Role::Peer => 0,
                    Role::Client => 1,
                });
                put_name(out, node_id.as_str());
                out.put_u16(tags.len() as u16);
                for tag in tags {
                    put_name(out, tag);
                }
            }
            Frame::Register(r) | Frame::Deregister(r) => put_record(out, r),
            Frame::Envelope(d) => {
                put_name(out, d.target.as_str());
                out.put_u64(d.incarnation);
                let e = &d.envelope;
                put_name(out, e.sender.as_str());
                out.put_u8(match e.ordering {
                    Ordering::Unordered => 0,
                    Ordering::Fifo => 1,
                });
                match &e.destination {
                    DestinationSelector::Exact(name) => {
                        out.put_u8(0);
                        put_name(out, name.as_str());
                    }
                    DestinationSelector::AliasAll(alias) => {
                        out.put_u8(1);
                        put_name(out, alias.as_str());
                    }
                    DestinationSelector::NameSet(names) => {
                        out.put_u8(2);
                        out.put_u16(names.len() as u16);
                        for name in names {
                            put_name(out, name.as_str());
                        }
                    }
                }
                match e.correlation_id {
                    Some(c) => {
                        out.put_u8(1);
                        out.put_u128(c);
                    }
                    None => out.put_u8(0),
                }
                out.put_u32(e.payload.len() as u32);
                out.put_slice(&e.payload);
            }
            Frame::SpawnRequest {
                request_id,
                document,
            } => {
                out.put_u64(*request_id);
                put_text(out, document);
            }
            Frame::SpawnReply {
                request_id,
                ok,
                message,
            } => {
                out.put_u64(*request_id);
                out.put_u8(*ok as u8);
                put_text(out, message);
            }
            Frame::Ping { nonce, reply } => {
                out.put_u64(*nonce);
                out.put_u8(*reply as u8);
            }
            Frame::Alias { add, alias, member } => {
                out.put_u8(*add as u8);
                put_name(out, alias.as_str());
                put_name(out, member.as_str());
            }
            Frame::Refuse { reason } => put_text(out, reason),
        }
        let len = (out.len() - start - 4) as u32;
        out[start..start + 4].copy_from_slice(&len.to_be_bytes());
    }

    pub fn to_bytes(&self) -> Bytes {
        let mut out = BytesMut::new();
        self.encode(&mut out);
        out.freeze()
    }

    /// Decodes a frame from its kind byte and body.
    pub fn decode(kind: u8, mut body: Bytes) -> Result<Frame, FrameError> {
        let b = &mut body;
        let frame = match kind {
            1 => {
                let version = get_u16(b)?;
                let role = match get_u8(b)? {
                    0 => Role::Peer,
                    1 => Role::Client,
                    other => return Err(FrameError::Malformed(format!("role {other}"))),
                };
                let node_id = NodeId::new(&get_name(b)?).map_err(malformed)?;
                let count = get_u16(b)?;
                let mut tags = Vec::with_capacity(count as usize);
                for _ in 0..count {
                    tags.push(get_name(b)?);
                }
                Frame::Hello {
                    version,
                    role,
                    node_id,
                    tags,
                }
            }
            2 => Frame::Register(get_record(b)?),
            3 => Frame::Deregister(get_record(b)?),
            4 => {
                let target = get_atom(b)?;
                let incarnation = get_u64(b)?;
                let sender = get_atom(b)?;
                let ordering = match get_u8(b)? {
                    0 => Ordering::Unordered,
                    1 => Ordering::Fifo,
                    other => return Err(FrameError::Malformed(format!("ordering {other}"))),
                };
                let destination = match get_u8(b)? {
                    0 => DestinationSelector::Exact(get_atom(b)?),
                    1 => DestinationSelector::AliasAll(
                        Alias::new(&get_name(b)?).map_err(malformed)?,
                    ),
                    2 => {
                        let count = get_u16(b)?;
                        let mut names = Vec::with_capacity(count as usize);
                        for _ in 0..count {
                            names.push(get_atom(b)?);
                        }
                        DestinationSelector::NameSet(names)
                    }
                    other => return Err(FrameError::Malformed(format!("selector {other}"))),
                };
                let correlation_id = match get_u8(b)? {
                    0 => None,
                    _ => {
                        need(b, 16)?;
                        Some(b.get_u128())
                    }
                };
                let payload = get_bytes(b)?;
                Frame::Envelope(RemoteDelivery {
                    target,
                    incarnation,
                    envelope: Envelope {
                        sender,
                        destination,
                        ordering,
                        payload,
                        correlation_id,
                    },
                })
            }
            5 => Frame::SpawnRequest {
                request_id: get_u64(b)?,
                document: get_text(b)?,
            },
            6 => Frame::SpawnReply {
                request_id: get_u64(b)?,
                ok: get_u8(b)? != 0,
                message: get_text(b)?,
            },
            7 => Frame::Ping {
                nonce: get_u64(b)?,
                reply: get_u8(b)? != 0,
            },
            8 => Frame::Alias {
                add: get_u8(b)? != 0,
                alias: Alias::new(&get_name(b)?).map_err(malformed)?,
                member: get_atom(b)?,
            },
            9 => Frame::Refuse {
                reason: get_text(b)?,
            },
            other => return Err(FrameError::UnknownKind(other)),
        };
        if b.has_remaining() {
            return Err(FrameError::Malformed("trailing bytes".into()));
        }
        Ok(frame)
    }

    /// Splits one complete frame off the front of `buf`, if present.
    pub fn take(buf: &mut BytesMut) -> Result<Option<Frame>, FrameError> {
        if buf.len() < 4 {
            return Ok(None);
        }
        let len = u32::from_be_bytes(buf[..4].try_into().unwrap()) as usize;
        if len > MAX_FRAME {
            return Err(FrameError::TooLarge(len));
        }
        if len == 0 {
            return Err(FrameError::Truncated);
        }
        if buf.len() < 4 + len {
            buf.reserve(4 + len - buf.len());
            return Ok(None);
        }
        buf.advance(4);
        let mut body = buf.split_to(len).freeze();
        let kind = body.get_u8();
        Frame::decode(kind, body).map(Some)
    }
}

fn malformed(err: impl std::fmt::Display) -> FrameError {
    FrameError::Malformed(err.to_string())
}

fn put_name(out: &mut BytesMut, s: &str) {
    debug_assert!(s.len() <= u8::MAX as usize);
    out.put_u8(s.len() as u8);
    out.put_slice(s.as_bytes());
}

fn put_text(out: &mut BytesMut, s: &str) {
    out.put_u32(s.len() as u32);
    out.put_slice(s.as_bytes());
}

fn put_record(out: &mut BytesMut, r: &NameRecord) {
    put_name(out, r.name.as_str());
    put_name(out, r.node.as_str());
    out.put_u64(r.incarnation);
}

fn need(b: &Bytes, n: usize) -> Result<(), FrameError> {
    if b.remaining() < n {
        Err(FrameError::Truncated)
    } else {
        Ok(())
    }
}

fn get_u8(b: &mut Bytes) -> Result<u8, FrameError> {
    need(b, 1)?;
    Ok(b.get_u8())
}

fn get_u16(b: &mut Bytes) -> Result<u16, FrameError> {
    need(b, 2)?;
    Ok(b.get_u16())
}

fn get_u64(b: &mut Bytes) -> Result<u64, FrameError> {
    need(b, 8)?;
    Ok(b.get_u64())
}

fn get_name(b: &mut Bytes) -> Result<String, FrameError> {
    let len = get_u8(b)? as usize;
    need(b, len)?;
    String::from_utf8(b.split_to(len).to_vec()).map_err(malformed)
}

fn get_text(b: &mut Bytes) -> Result<String, FrameError> {
    let raw = get_bytes(b)?;
    String::from_utf8(raw.to_vec()).map_err(malformed)
}

fn get_bytes(b: &mut Bytes) -> Result<Bytes, FrameError> {
    need(b, 4)?;
    let len = b.get_u32() as usize;
    need(b, len)?;
    Ok(b.split_to(len))
}

fn get_atom(b: &mut Bytes) -> Result<AtomName, FrameError> {
    AtomName::new(&get_name(b)?).map_err(malformed)
}

fn get_record(b: &mut Bytes) -> Result<NameRecord, FrameError> {
    Ok(NameRecord {
        name: get_atom(b)?,
        node: NodeId::new(&get_name(b)?).map_err(malformed)?,
        incarnation: get_u64(b)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn name() -> impl Strategy<Value = AtomName> {
        "[a-z0-9./_-]{1,40}".prop_map(|s| AtomName::new(&s).unwrap())
    }

    fn node() -> impl Strategy<Value = NodeId> {
        "[a-z0-9]{1,8}".prop_map(|s| NodeId::new(&s).unwrap())
    }

    fn alias() -> impl Strategy<Value = Alias> {
        "[a-z]{1,12}".prop_map(|s| Alias::new(&s).unwrap())
    }

    fn record() -> impl Strategy<Value = NameRecord> {
        (name(), node(), any::<u64>()).prop_map(|(name, node, incarnation)| NameRecord {
            name,
            node,
            incarnation,
        })
    }

    fn selector() -> impl Strategy<Value = DestinationSelector> {
        prop_oneof![
            name().prop_map(DestinationSelector::Exact),
            alias().prop_map(DestinationSelector::AliasAll),
            proptest::collection::vec(name(), 0..5).prop_map(DestinationSelector::NameSet),
        ]
    }

    fn frame() -> impl Strategy<Value = Frame> {
        let envelope = (
            name(),
            any::<u64>(),
            name(),
            any::<bool>(),
            selector(),
            proptest::option::of(any::<u128>()),
            proptest::collection::vec(any::<u8>(), 0..256),
        )
            .prop_map(|(target, incarnation, sender, fifo, destination, corr, payload)| {
                Frame::Envelope(RemoteDelivery {
                    target,
                    incarnation,
                    envelope: Envelope {
                        sender,
                        destination,
                        ordering: if fifo { Ordering::Fifo } else { Ordering::Unordered },
                        payload: Bytes::from(payload),
                        correlation_id: corr,
                    },
                })
            });
        prop_oneof![
            (any::<u16>(), any::<bool>(), node(), proptest::collection::vec("[a-z]{1,6}", 0..4))
                .prop_map(|(version, client, node_id, tags)| Frame::Hello {
                    version,
                    role: if client { Role::Client } else { Role::Peer },
                    node_id,
                    tags,
                }),
            record().prop_map(Frame::Register),
            record().prop_map(Frame::Deregister),
            envelope,
            (any::<u64>(), ".{0,64}").prop_map(|(request_id, document)| Frame::SpawnRequest {
                request_id,
                document
            }),
            (any::<u64>(), any::<bool>(), ".{0,32}").prop_map(|(request_id, ok, message)| {
                Frame::SpawnReply {
                    request_id,
                    ok,
                    message,
                }
            }),
            (any::<u64>(), any::<bool>()).prop_map(|(nonce, reply)| Frame::Ping { nonce, reply }),
            (any::<bool>(), alias(), name()).prop_map(|(add, alias, member)| Frame::Alias {
                add,
                alias,
                member
            }),
            ".{0,32}".prop_map(|reason| Frame::Refuse { reason }),
        ]
    }

    proptest! {
        #[test]
        fn round_trip(frames in proptest::collection::vec(frame(), 1..8)) {
            let mut buf = BytesMut::new();
            for f in &frames {
                f.encode(&mut buf);
            }
            let mut decoded = Vec::new();
            while let Some(f) = Frame::take(&mut buf).unwrap() {
                decoded.push(f);
            }
            prop_assert!(buf.is_empty());
            prop_assert_eq!(decoded, frames);
        }

        #[test]
        fn partial_input_waits(f in frame(), cut in 0usize..64) {
            let bytes = f.to_bytes();
            let cut = cut.min(bytes.len() - 1);
            let mut buf = BytesMut::from(&bytes[..cut]);
            prop_assert_eq!(Frame::take(&mut buf).unwrap(), None);
            buf.extend_from_slice(&bytes[cut..]);
            prop_assert_eq!(Frame::take(&mut buf).unwrap(), Some(f));
        }
    }

    #[test]
    fn rejects_oversize_and_unknown_kind() {
        let mut buf = BytesMut::new();
        buf.put_u32((MAX_FRAME + 1) as u32);
        assert_eq!(Frame::take(&mut buf), Err(FrameError::TooLarge(MAX_FRAME + 1)));
        let mut buf = BytesMut::new();
        buf.put_u32(1);
        buf.put_u8(42);
        assert_eq!(Frame::take(&mut buf), Err(FrameError::UnknownKind(42)));
    }

    #[test]
    fn length_prefix_layout() {
        let bytes = Frame::Ping { nonce: 7, reply: true }.to_bytes();
        assert_eq!(&bytes[..], &[0, 0, 0, 10, 7, 0, 0, 0, 0, 0, 0, 0, 7, 1]);
    }
}
