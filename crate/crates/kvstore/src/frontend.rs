//! The reactive atom serving `PUT /kv/{key}` and `GET /kv/{key}`.
//!
//! `GET /ring` returns the coordinator's current view as JSON.

use std::collections::VecDeque;
use std::time::Duration;

use async_trait::async_trait;
use bytes::Bytes;
use radon_core::engine::{AtomContext, Behavior, GuestResult};
use radon_core::messaging::RecvError;
use radon_core::model::{AtomName, Event, Inbound, Ordering};

use crate::coordinator::COORDINATOR;
use crate::protocol::{KvMessage, KvOp, KvRequest, Outcome, ROUTING_LOOP};
use crate::ring::RingView;

pub const KV_PREFIX: &str = "/kv/";
pub const RING_PATH: &str = "/ring";
/// Keys longer than this are rejected with 400.
pub const MAX_KEY_LEN: usize = 512;

const CACHE_KEY: &[u8] = b"kvfrontend/ring";
const TOPOLOGY_TIMEOUT: Duration = Duration::from_secs(1);
const REQUEST_TIMEOUT: Duration = Duration::from_secs(10);

pub struct KvFrontend;

enum Reply {
    Done(Outcome),
    Unreachable,
    TimedOut,
    Closed,
}

struct Session {
    me: AtomName,
    view: Option<RingView>,
    next_id: u64,
    deferred: VecDeque<Event>,
}

impl Session {
    /// Waits for a message satisfying `accept`, deferring events.
    async fn await_message<T>(
        &mut self,
        ctx: &mut AtomContext,
        timeout: Duration,
        mut accept: impl FnMut(KvMessage) -> Option<T>,
    ) -> Result<T, RecvError> {
        let deadline = tokio::time::Instant::now() + timeout;
        loop {
            let left = deadline.saturating_duration_since(tokio::time::Instant::now());
            match ctx.receive(Some(left)).await? {
                Inbound::Message(envelope) => {
                    if let Ok(message) = KvMessage::decode(envelope.payload) {
                        if let Some(found) = accept(message) {
                            return Ok(found);
                        }
                    }
                }
                Inbound::Event(event) => self.deferred.push_back(event),
            }
        }
    }

    /// Asks the coordinator for its view; `None` if it does not answer.
    async fn fetch(&mut self, ctx: &mut AtomContext) -> Result<Option<RingView>, RecvError> {
        let coordinator = AtomName::new(COORDINATOR).expect("valid name");
        if ctx.send(coordinator, Ordering::Fifo, KvMessage::Topology.encode()).is_err() {
            return Ok(None);
        }
        match self
            .await_message(ctx, TOPOLOGY_TIMEOUT, |m| match m {
                KvMessage::View(view) => Some(view),
                _ => None,
            })
            .await
        {
            Ok(view) => Ok(Some(view)),
            Err(RecvError::Timeout) => Ok(None),
            Err(err) => Err(err),
        }
    }

    /// Refreshes the view from the coordinator, keeping the cached one if
    /// the coordinator is unreachable.
    async fn refresh(&mut self, ctx: &mut AtomContext) -> Result<(), RecvError> {
        match self.fetch(ctx).await? {
            Some(view) => {
                if !view.is_empty() {
                    let _ = ctx.storage_set(CACHE_KEY, &KvMessage::View(view.clone()).encode());
                }
                if self.view.as_ref().is_none_or(|v| v.version() <= view.version()) {
                    self.view = Some(view);
                }
            }
            None => {
                if self.view.is_none() {
                    if let Ok(Some(raw)) = ctx.storage_get(CACHE_KEY) {
                        if let Ok(KvMessage::View(view)) = KvMessage::decode(raw) {
                            self.view = Some(view);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    async fn request(&mut self, ctx: &mut AtomContext, op: KvOp) -> Result<Reply, RecvError> {
        let Some(view) = self.view.as_ref().filter(|v| !v.is_empty()) else {
            return Ok(Reply::Unreachable);
        };
        let primary = view.primary(op.key()).expect("non-empty ring");
        self.next_id = self.next_id.wrapping_add(1);
        let correlation_id = self.next_id;
        let request = KvRequest {
            op,
            reply_to: self.me.clone(),
            correlation_id,
            hops: 0,
            written: Vec::new(),
        };
        if ctx
            .send(primary, Ordering::Fifo, KvMessage::Request(request).encode())
            .is_err()
        {
            return Ok(Reply::Unreachable);
        }
        let outcome = self
            .await_message(ctx, REQUEST_TIMEOUT, |m| match m {
                KvMessage::Response(r) if r.correlation_id == correlation_id => Some(r.outcome),
                _ => None,
            })
            .await;
        match outcome {
            Ok(outcome) => Ok(Reply::Done(outcome)),
            Err(RecvError::Timeout) => Ok(Reply::TimedOut),
            Err(RecvError::Closed) => Ok(Reply::Closed),
        }
    }

    async fn ring_json(&mut self, ctx: &mut AtomContext) -> Result<(u16, Bytes), RecvError> {
        let Some(view) = self.fetch(ctx).await? else {
            return Ok((503, Bytes::from_static(b"coordinator unreachable")));
        };
        let members: Vec<&str> = view.members().map(|m| m.as_str()).collect();
        let body = serde_json::json!({
            "version": view.version(),
            "replication": view.replication(),
            "members": members,
        });
        Ok((200, Bytes::from(body.to_string())))
    }

    async fn serve(&mut self, ctx: &mut AtomContext, event: &Event) -> Result<(u16, Bytes), RecvError> {
        let path = event.path.split('?').next().unwrap_or_default();
        if path == RING_PATH && event.method == "GET" {
            return self.ring_json(ctx).await;
        }
        let Some(key) = path.strip_prefix(KV_PREFIX).filter(|k| !k.is_empty()) else {
            return Ok((404, Bytes::from_static(b"no such resource")));
        };
        if key.len() > MAX_KEY_LEN {
            return Ok((400, Bytes::from_static(b"key too long")));
        }
        let key = Bytes::copy_from_slice(key.as_bytes());
        let op = match event.method.as_str() {
            "PUT" => KvOp::Put {
                key,
                value: event.body.clone(),
            },
            "GET" => KvOp::Get { key },
            _ => return Ok((405, Bytes::from_static(b"method not allowed"))),
        };
        if self.view.is_none() {
            self.refresh(ctx).await?;
        }
        let mut retried = false;
        loop {
            let reply = self.request(ctx, op.clone()).await?;
            let retry = match &reply {
                Reply::Done(Outcome::Error(text)) => text == ROUTING_LOOP,
                Reply::Unreachable => true,
                _ => false,
            };
            if retry && !retried {
                retried = true;
                self.refresh(ctx).await?;
                continue;
            }
            return Ok(match reply {
                Reply::Done(Outcome::Ok(Some(value))) => (200, value),
                Reply::Done(Outcome::Ok(None)) => (200, Bytes::new()),
                Reply::Done(Outcome::NotFound) => (404, Bytes::from_static(b"not found")),
                Reply::Done(Outcome::Error(text)) => (500, Bytes::from(text)),
                Reply::Unreachable => (503, Bytes::from_static(b"ring unavailable")),
                Reply::TimedOut => (504, Bytes::from_static(b"storage timeout")),
                Reply::Closed => return Err(RecvError::Closed),
            });
        }
    }
}

#[async_trait]
impl Behavior for KvFrontend {
    async fn main(&self, ctx: &mut AtomContext, initial: Option<Event>) -> GuestResult {
        let seed = ctx.random_bytes(8)?;
        let mut session = Session {
            me: ctx.self_name().clone(),
            view: None,
            next_id: u64::from_be_bytes(seed.try_into().expect("8 bytes")),
            deferred: initial.into_iter().collect(),
        };
        if session.refresh(ctx).await.is_err() {
            return Ok(());
        }
        loop {
            while let Some(event) = session.deferred.pop_front() {
                match session.serve(ctx, &event).await {
                    Ok((status, body)) => ctx.respond(event.id, status, body)?,
                    Err(_) => return Ok(()),
                }
            }
            match ctx.receive(None).await {
                Ok(Inbound::Event(event)) => session.deferred.push_back(event),
                Ok(Inbound::Message(_)) => {}
                Err(_) => return Ok(()),
            }
        }
    }
}
