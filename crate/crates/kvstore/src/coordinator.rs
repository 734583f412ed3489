//! The daemon tracking ring membership.

use async_trait::async_trait;
use radon_core::engine::{AtomContext, Behavior, Fault, GuestResult};
use radon_core::model::{AtomName, Event, Inbound, Ordering};

use crate::protocol::KvMessage;
use crate::ring::RingView;

pub const COORDINATOR: &str = "coordinator";
pub const DEFAULT_REPLICATION: usize = 2;

fn ring_key(ctx: &AtomContext) -> Vec<u8> {
    format!("{}/ring", ctx.self_name()).into_bytes()
}

/// Reads the replication factor from the `replication` argument.
pub fn replication_arg(ctx: &AtomContext) -> Result<usize, Fault> {
    match ctx.argument("replication") {
        None => Ok(DEFAULT_REPLICATION),
        Some(raw) => match raw.parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Fault::new(format!("bad replication argument {raw:?}"))),
        },
    }
}

pub struct Coordinator;

impl Coordinator {
    fn load(ctx: &AtomContext, replication: usize) -> Result<RingView, Fault> {
        if let Some(saved) = ctx.storage_get(&ring_key(ctx))? {
            if let Ok(KvMessage::View(view)) = KvMessage::decode(saved) {
                if view.replication() == replication {
                    return Ok(view);
                }
            }
        }
        Ok(RingView::new(replication)?)
    }

    fn reply(ctx: &AtomContext, to: &AtomName, view: &RingView) {
        let _ = ctx.send(to.clone(), Ordering::Fifo, KvMessage::View(view.clone()).encode());
    }
}

#[async_trait]
impl Behavior for Coordinator {
    async fn main(&self, ctx: &mut AtomContext, _initial: Option<Event>) -> GuestResult {
        let replication = replication_arg(ctx)?;
        let mut view = Self::load(ctx, replication)?;
        loop {
            let envelope = match ctx.receive(None).await {
                Ok(Inbound::Message(envelope)) => envelope,
                Ok(Inbound::Event(_)) => continue,
                Err(_) => return Ok(()),
            };
            match KvMessage::decode(envelope.payload) {
                Ok(KvMessage::Join(member)) => match view.insert(member.clone()) {
                    Ok(true) => {
                        let encoded = KvMessage::View(view.clone()).encode();
                        ctx.storage_set(&ring_key(ctx), &encoded)?;
                        tracing::info!(member = %member, version = view.version(), "ring member joined");
                        Self::reply(ctx, &envelope.sender, &view);
                        for other in view.members() {
                            if other != &envelope.sender {
                                let _ = ctx.send(other.clone(), Ordering::Fifo, encoded.clone());
                            }
                        }
                    }
                    Ok(false) => Self::reply(ctx, &envelope.sender, &view),
                    Err(err) => {
                        tracing::error!("rejected join: {err}");
                        Self::reply(ctx, &envelope.sender, &view);
                    }
                },
                Ok(KvMessage::Topology) => Self::reply(ctx, &envelope.sender, &view),
                Ok(_) => {}
                Err(err) => tracing::debug!("coordinator ignored payload: {err}"),
            }
        }
    }
}
