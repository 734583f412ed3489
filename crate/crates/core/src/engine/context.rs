use std::sync::Arc;
use std::time::{Duration, SystemTime};

use bytes::Bytes;

use super::{Core, InstanceCell, InstanceState};
use crate::messaging::{Mailbox, RecvError, SendError};
use crate::model::{
    Alias, AtomName, DestinationSelector, Envelope, EventId, EventResponse, Inbound, NodeId,
    Ordering,
};
use crate::naming::{NameSpace, NamingError};
use crate::storage::StorageError;

#[derive(Debug, thiserror::Error)]
pub enum RuntimeError {
    #[error("instance is stopped")]
    Stopped,
    #[error(transparent)]
    Send(#[from] SendError),
    #[error(transparent)]
    Naming(#[from] NamingError),
    #[error(transparent)]
    Storage(#[from] StorageError),
    #[error("no pending event {0}")]
    UnknownEvent(EventId),
    #[error("random source failed: {0}")]
    Random(String),
}

/// The guest's only handle on the node. Every interaction an atom has with
/// the outside world goes through these methods.
pub struct AtomContext {
    core: Arc<Core>,
    cell: Arc<InstanceCell>,
    mailbox: Arc<Mailbox>,
    exited: bool,
}

impl AtomContext {
    pub(super) fn new(core: Arc<Core>, cell: Arc<InstanceCell>) -> Self {
        let mailbox = cell.mailbox.lock().clone();
        Self {
            core,
            cell,
            mailbox,
            exited: false,
        }
    }

    fn check(&self) -> Result<(), RuntimeError> {
        if self.exited || self.cell.is_terminated() {
            Err(RuntimeError::Stopped)
        } else {
            Ok(())
        }
    }

    pub fn self_name(&self) -> &AtomName {
        &self.cell.name
    }

    pub fn definition(&self) -> &str {
        &self.cell.definition
    }

    pub fn node(&self) -> &NodeId {
        &self.core.node
    }

    pub fn incarnation(&self) -> u64 {
        self.cell.incarnation()
    }

    /// Value of a configuration argument.
    pub fn argument(&self, key: &str) -> Option<&str> {
        self.cell.config.args.get(key).map(String::as_str)
    }

    /// Terminates the instance normally. Later calls fail with `Stopped`.
    pub fn exit(&mut self) {
        if !self.exited {
            self.exited = true;
            self.core.teardown(&self.cell, InstanceState::Stopped, Some("exit"));
        }
    }

    pub fn send(
        &self,
        destination: impl Into<DestinationSelector>,
        ordering: Ordering,
        payload: impl Into<Bytes>,
    ) -> Result<usize, RuntimeError> {
        self.send_envelope(destination.into(), ordering, payload.into(), None)
    }

    pub fn send_correlated(
        &self,
        destination: impl Into<DestinationSelector>,
        ordering: Ordering,
        payload: impl Into<Bytes>,
        correlation_id: u128,
    ) -> Result<usize, RuntimeError> {
        self.send_envelope(destination.into(), ordering, payload.into(), Some(correlation_id))
    }

    fn send_envelope(
        &self,
        destination: DestinationSelector,
        ordering: Ordering,
        payload: Bytes,
        correlation_id: Option<u128>,
    ) -> Result<usize, RuntimeError> {
        self.check()?;
        let envelope = Envelope {
            sender: self.cell.name.clone(),
            destination,
            ordering,
            payload,
            correlation_id,
        };
        Ok(self.core.messaging.send(envelope)?)
    }

    /// Suspends the instance until a message or event arrives. `Closed`
    /// means the instance was retired or stopped and should return.
    pub async fn receive(&mut self, timeout: Option<Duration>) -> Result<Inbound, RecvError> {
        if self.check().is_err() {
            return Err(RecvError::Closed);
        }
        self.cell.set_state(InstanceState::Idle);
        let result = self.mailbox.receive(timeout).await;
        self.cell.set_state(InstanceState::Busy);
        result
    }

    pub fn resolve(&self, query: &str, space: NameSpace) -> Result<Vec<AtomName>, RuntimeError> {
        self.check()?;
        Ok(self.core.naming.resolve(query, space)?)
    }

    pub fn alias_add(&self, alias: &Alias, name: &AtomName) -> Result<(), RuntimeError> {
        self.check()?;
        Ok(self.core.naming.alias_add(alias, name)?)
    }

    pub fn alias_remove(&self, alias: &Alias, name: &AtomName) -> Result<(), RuntimeError> {
        self.check()?;
        self.core.naming.alias_remove(alias, name);
        Ok(())
    }

    pub fn storage_get(&self, key: &[u8]) -> Result<Option<Bytes>, RuntimeError> {
        self.check()?;
        Ok(self.core.storage.get(key))
    }

    pub fn storage_set(&self, key: &[u8], value: &[u8]) -> Result<(), RuntimeError> {
        self.check()?;
        Ok(self.core.storage.set(key, value)?)
    }

    /// Completes an event handed to this instance.
    pub fn respond(
        &self,
        event: EventId,
        status: u16,
        body: impl Into<Bytes>,
    ) -> Result<(), RuntimeError> {
        self.check()?;
        let response = EventResponse {
            status,
            body: body.into(),
        };
        if self.core.respond(&self.cell, event, response) {
            Ok(())
        } else {
            Err(RuntimeError::UnknownEvent(event))
        }
    }

    pub fn now(&self) -> SystemTime {
        SystemTime::now()
    }

    pub fn random_bytes(&self, n: usize) -> Result<Vec<u8>, RuntimeError> {
        let mut buf = vec![0u8; n];
        getrandom::fill(&mut buf).map_err(|e| RuntimeError::Random(e.to_string()))?;
        Ok(buf)
    }
}
