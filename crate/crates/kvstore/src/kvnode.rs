//! The storage daemon holding one ring position.
//!
//! Entries live in node storage under `<instance>/<key>` with a one-byte
//! marker: `1` followed by the value, or a lone `0` once the key has moved
//! away. The keys an instance has ever written are kept in
//! `<instance>#index/<chunk>` records so rebalancing survives restarts.

use std::collections::HashSet;
use std::time::Duration;

use async_trait::async_trait;
use bytes::{Buf, BufMut, Bytes, BytesMut};
use radon_core::engine::{AtomContext, Behavior, GuestResult};
use radon_core::model::{AtomName, Event, Inbound, Ordering};

use crate::coordinator::COORDINATOR;
use crate::protocol::{KvMessage, KvOp, KvRequest, KvResponse, Outcome, ROUTING_LOOP};
use crate::ring::RingView;

const LIVE: u8 = 1;
const TOMBSTONE: u8 = 0;
const INDEX_CHUNK: usize = 64;
const JOIN_RETRY: Duration = Duration::from_millis(200);

pub fn data_key(instance: &AtomName, key: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(instance.as_str().len() + 1 + key.len());
    out.extend_from_slice(instance.as_str().as_bytes());
    out.push(b'/');
    out.extend_from_slice(key);
    out
}

/// Decodes a stored entry, `None` for tombstones.
pub fn live_value(stored: &[u8]) -> Option<&[u8]> {
    match stored.split_first() {
        Some((&LIVE, value)) => Some(value),
        _ => None,
    }
}

struct KeyIndex {
    prefix: String,
    known: HashSet<Bytes>,
    order: Vec<Bytes>,
    sealed: usize,
}

impl KeyIndex {
    fn chunk_key(&self, chunk: usize) -> Vec<u8> {
        format!("{}{chunk}", self.prefix).into_bytes()
    }

    fn load(ctx: &AtomContext) -> GuestResult<Self> {
        let mut index = Self {
            prefix: format!("{}#index/", ctx.self_name()),
            known: HashSet::new(),
            order: Vec::new(),
            sealed: 0,
        };
        loop {
            let Some(mut raw) = ctx.storage_get(&index.chunk_key(index.sealed))? else {
                break;
            };
            let mut count = 0;
            while raw.remaining() >= 4 {
                let len = raw.get_u32() as usize;
                if raw.remaining() < len {
                    break;
                }
                let key = raw.split_to(len);
                count += 1;
                if index.known.insert(key.clone()) {
                    index.order.push(key);
                }
            }
            if count < INDEX_CHUNK {
                break;
            }
            index.sealed += 1;
        }
        Ok(index)
    }

    fn add(&mut self, ctx: &AtomContext, key: &Bytes) -> GuestResult {
        if !self.known.insert(key.clone()) {
            return Ok(());
        }
        self.order.push(key.clone());
        let open = &self.order[self.sealed * INDEX_CHUNK..];
        let mut chunk = BytesMut::new();
        for key in open {
            chunk.put_u32(key.len() as u32);
            chunk.put_slice(key);
        }
        ctx.storage_set(&self.chunk_key(self.sealed), &chunk)?;
        if open.len() == INDEX_CHUNK {
            self.sealed += 1;
        }
        Ok(())
    }
}

pub struct KvNode;

struct State {
    me: AtomName,
    view: RingView,
    index: KeyIndex,
}

impl State {
    fn reply(&self, ctx: &AtomContext, to: &AtomName, correlation_id: u64, outcome: Outcome) {
        let message = KvMessage::Response(KvResponse {
            correlation_id,
            outcome,
        });
        let _ = ctx.send(to.clone(), Ordering::Fifo, message.encode());
    }

    fn forward(&self, ctx: &AtomContext, to: AtomName, request: KvRequest) {
        let reply_to = request.reply_to.clone();
        let correlation_id = request.correlation_id;
        if ctx
            .send(to.clone(), Ordering::Fifo, KvMessage::Request(request).encode())
            .is_err()
        {
            self.reply(
                ctx,
                &reply_to,
                correlation_id,
                Outcome::Error(format!("cannot reach {to}")),
            );
        }
    }

    fn write(&mut self, ctx: &AtomContext, key: &Bytes, value: &[u8]) -> GuestResult {
        let mut stored = Vec::with_capacity(value.len() + 1);
        stored.push(LIVE);
        stored.extend_from_slice(value);
        ctx.storage_set(&data_key(&self.me, key), &stored)?;
        self.index.add(ctx, key)
    }

    fn read(&self, ctx: &AtomContext, key: &[u8]) -> GuestResult<Option<Bytes>> {
        Ok(ctx
            .storage_get(&data_key(&self.me, key))?
            .filter(|v| live_value(v).is_some())
            .map(|v| v.slice(1..)))
    }

    fn handle(&mut self, ctx: &AtomContext, mut request: KvRequest) -> GuestResult {
        if request.hops as usize > self.view.len() {
            self.reply(
                ctx,
                &request.reply_to,
                request.correlation_id,
                Outcome::Error(ROUTING_LOOP.into()),
            );
            return Ok(());
        }
        let responsible = self.view.responsible_set(request.op.key())?;
        let mine = responsible.contains(&self.me);
        let successor = self.view.successor(&self.me).unwrap_or_else(|| self.me.clone());
        match request.op.clone() {
            KvOp::Get { key } => {
                if mine {
                    let outcome = match self.read(ctx, &key)? {
                        Some(value) => Outcome::Ok(Some(value)),
                        None => Outcome::NotFound,
                    };
                    self.reply(ctx, &request.reply_to, request.correlation_id, outcome);
                } else {
                    request.hops += 1;
                    self.forward(ctx, successor, request);
                }
            }
            KvOp::Put { key, value } => {
                let wrote = mine && !request.written.contains(&self.me);
                if wrote {
                    self.write(ctx, &key, &value)?;
                    request.written.push(self.me.clone());
                } else if request.written.is_empty() {
                    request.hops += 1;
                    self.forward(ctx, successor, request);
                    return Ok(());
                } else {
                    request.hops += 1;
                }
                match responsible.iter().find(|m| !request.written.contains(m)) {
                    Some(next) => {
                        let next = next.clone();
                        self.forward(ctx, next, request);
                    }
                    None => self.reply(ctx, &request.reply_to, request.correlation_id, Outcome::Ok(None)),
                }
            }
        }
        Ok(())
    }

    /// Hands keys this instance no longer covers to their new primary.
    fn rebalance(&mut self, ctx: &AtomContext) -> GuestResult {
        let mut moved = 0usize;
        for key in self.index.order.clone() {
            if self.view.is_responsible(&self.me, &key) {
                continue;
            }
            let Some(value) = self.read(ctx, &key)? else {
                continue;
            };
            let request = KvRequest {
                op: KvOp::Put {
                    key: key.clone(),
                    value,
                },
                reply_to: self.me.clone(),
                correlation_id: 0,
                hops: 0,
                written: Vec::new(),
            };
            let primary = self.view.primary(&key)?;
            let _ = ctx.send(primary, Ordering::Fifo, KvMessage::Request(request).encode());
            ctx.storage_set(&data_key(&self.me, &key), &[TOMBSTONE])?;
            moved += 1;
        }
        if moved > 0 {
            tracing::info!(atom = %self.me, moved, version = self.view.version(), "rebalanced");
        }
        Ok(())
    }
}

/// Sends `Join` until the coordinator answers with a view, parking any
/// requests that arrive meanwhile.
async fn join(ctx: &mut AtomContext, backlog: &mut Vec<KvRequest>) -> GuestResult<Option<RingView>> {
    let me = ctx.self_name().clone();
    let coordinator = AtomName::new(COORDINATOR).expect("valid name");
    loop {
        let _ = ctx.send(coordinator.clone(), Ordering::Fifo, KvMessage::Join(me.clone()).encode());
        let deadline = tokio::time::Instant::now() + JOIN_RETRY;
        loop {
            let left = deadline.saturating_duration_since(tokio::time::Instant::now());
            match ctx.receive(Some(left)).await {
                Ok(Inbound::Message(envelope)) => match KvMessage::decode(envelope.payload) {
                    Ok(KvMessage::View(view)) if view.contains(&me) => return Ok(Some(view)),
                    Ok(KvMessage::Request(request)) => backlog.push(request),
                    _ => {}
                },
                Ok(Inbound::Event(_)) => {}
                Err(radon_core::messaging::RecvError::Timeout) => break,
                Err(_) => return Ok(None),
            }
        }
    }
}

#[async_trait]
impl Behavior for KvNode {
    async fn main(&self, ctx: &mut AtomContext, _initial: Option<Event>) -> GuestResult {
        let index = KeyIndex::load(ctx)?;
        let mut backlog = Vec::new();
        let Some(view) = join(ctx, &mut backlog).await? else {
            return Ok(());
        };
        let mut state = State {
            me: ctx.self_name().clone(),
            view,
            index,
        };
        state.rebalance(ctx)?;
        for request in backlog {
            state.handle(ctx, request)?;
        }
        loop {
            let envelope = match ctx.receive(None).await {
                Ok(Inbound::Message(envelope)) => envelope,
                Ok(Inbound::Event(_)) => continue,
                Err(_) => return Ok(()),
            };
            match KvMessage::decode(envelope.payload) {
                Ok(KvMessage::Request(request)) => state.handle(ctx, request)?,
                Ok(KvMessage::View(view)) => {
                    if view.version() > state.view.version() {
                        state.view = view;
                        state.rebalance(ctx)?;
                    }
                }
                Ok(_) => {}
                Err(err) => tracing::debug!("kvnode ignored payload: {err}"),
            }
        }
    }
}
