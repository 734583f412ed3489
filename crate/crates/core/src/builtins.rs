//! Small behaviors shipped with every node.

use async_trait::async_trait;

use crate::engine::{AtomContext, AtomDefinition, Behavior, GuestResult};
use crate::model::{Event, Inbound};

/// Reactive atom answering every event with its own body.
pub struct Echo;

#[async_trait]
impl Behavior for Echo {
    async fn main(&self, ctx: &mut AtomContext, initial: Option<Event>) -> GuestResult {
        if let Some(event) = initial {
            ctx.respond(event.id, 200, event.body)?;
        }
        loop {
            match ctx.receive(None).await {
                Ok(Inbound::Event(event)) => ctx.respond(event.id, 200, event.body)?,
                Ok(Inbound::Message(_)) => {}
                Err(_) => return Ok(()),
            }
        }
    }
}

/// Traps on every event or message it receives. Used for fault drills.
pub struct Faulty;

#[async_trait]
impl Behavior for Faulty {
    async fn main(&self, ctx: &mut AtomContext, initial: Option<Event>) -> GuestResult {
        if initial.is_some() {
            panic!("injected fault");
        }
        match ctx.receive(None).await {
            Ok(_) => panic!("injected fault"),
            Err(_) => Ok(()),
        }
    }
}

pub fn definitions() -> Vec<AtomDefinition> {
    vec![
        AtomDefinition::new("echo", Echo),
        AtomDefinition::new("faulty", Faulty),
    ]
}
