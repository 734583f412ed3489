//! Mailboxes and envelope routing.
//!
//! Sends resolve their destination through the naming registry. Envelopes
//! for instances on this node go straight into the target mailbox; the rest
//! are handed to the transport, which keeps a single ordered stream per
//! node pair so FIFO order survives the wire.

use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicU64, Ordering as AtomicOrdering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::{Mutex, RwLock};
use serde::Serialize;
use tokio::sync::Notify;

use crate::model::{AtomName, DestinationSelector, Envelope, Inbound, NodeId, Ordering, MAX_PAYLOAD};
use crate::naming::{NameRecord, Naming};

pub const DEFAULT_MAILBOX_CAPACITY: usize = 65_536;

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum RecvError {
    #[error("receive timed out")]
    Timeout,
    #[error("mailbox closed")]
    Closed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PushError {
    Full,
    Closed,
}

#[derive(Default)]
struct Lanes {
    fifo: VecDeque<Inbound>,
    unordered: VecDeque<Inbound>,
    closed: bool,
}

impl Lanes {
    fn len(&self) -> usize {
        self.fifo.len() + self.unordered.len()
    }
}

/// Two-lane queue with many producers and a single consumer (the owning
/// instance). The FIFO lane is always drained first.
pub struct Mailbox {
    lanes: Mutex<Lanes>,
    notify: Notify,
    capacity: usize,
}

impl Mailbox {
    pub fn new(capacity: usize) -> Self {
        Self {
            lanes: Mutex::new(Lanes::default()),
            notify: Notify::new(),
            capacity,
        }
    }

    pub fn push(&self, item: Inbound, ordering: Ordering) -> Result<(), PushError> {
        {
            let mut lanes = self.lanes.lock();
            if lanes.closed {
                return Err(PushError::Closed);
            }
            if lanes.len() >= self.capacity {
                return Err(PushError::Full);
            }
            match ordering {
                Ordering::Fifo => lanes.fifo.push_back(item),
                Ordering::Unordered => lanes.unordered.push_back(item),
            }
        }
        self.notify.notify_one();
        Ok(())
    }

    pub fn try_receive(&self) -> Result<Option<Inbound>, RecvError> {
        let mut lanes = self.lanes.lock();
        if let Some(item) = lanes.fifo.pop_front().or_else(|| lanes.unordered.pop_front()) {
            return Ok(Some(item));
        }
        if lanes.closed {
            return Err(RecvError::Closed);
        }
        Ok(None)
    }

    /// Waits for the next item. `None` waits forever; a zero timeout polls.
    pub async fn receive(&self, timeout: Option<Duration>) -> Result<Inbound, RecvError> {
        let deadline = timeout.map(|t| tokio::time::Instant::now() + t);
        loop {
            if let Some(item) = self.try_receive()? {
                return Ok(item);
            }
            match deadline {
                None => self.notify.notified().await,
                Some(deadline) => {
                    if tokio::time::timeout_at(deadline, self.notify.notified())
                        .await
                        .is_err()
                    {
                        return self.try_receive()?.ok_or(RecvError::Timeout);
                    }
                }
            }
        }
    }

    /// Closes the mailbox and returns whatever was still queued.
    pub fn close(&self) -> Vec<Inbound> {
        let drained = {
            let mut lanes = self.lanes.lock();
            lanes.closed = true;
            let mut drained: Vec<Inbound> = lanes.fifo.drain(..).collect();
            drained.extend(lanes.unordered.drain(..));
            drained
        };
        self.notify.notify_one();
        drained
    }

    pub fn is_closed(&self) -> bool {
        self.lanes.lock().closed
    }

    pub fn len(&self) -> usize {
        self.lanes.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SendError {
    #[error("no atom named {0}")]
    UnknownDestination(AtomName),
    #[error("payload of {0} bytes exceeds the 4 MiB limit")]
    PayloadTooLarge(usize),
}

/// Envelope addressed to one concrete instance on a remote node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RemoteDelivery {
    pub target: AtomName,
    pub incarnation: u64,
    pub envelope: Envelope,
}

/// Transport side of the router.
pub trait Outbound: Send + Sync {
    /// Queues a delivery on the stream to `node`. Returns false when there
    /// is no live connection, in which case the delivery is dropped.
    fn forward(&self, node: &NodeId, delivery: RemoteDelivery) -> bool;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropReason {
    Overflow,
    Stale,
    Unknown,
    LinkDown,
}

#[derive(Default)]
pub struct MessagingStats {
    delivered: AtomicU64,
    forwarded: AtomicU64,
    overflow: AtomicU64,
    stale: AtomicU64,
    unknown: AtomicU64,
    link_down: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, serde::Deserialize)]
pub struct MessagingCounters {
    pub delivered: u64,
    pub forwarded: u64,
    pub dropped_overflow: u64,
    pub dropped_stale: u64,
    pub dropped_unknown: u64,
    pub dropped_link: u64,
}

impl MessagingCounters {
    pub fn dropped(&self) -> u64 {
        self.dropped_overflow + self.dropped_stale + self.dropped_unknown + self.dropped_link
    }
}

impl MessagingStats {
    fn count(&self, reason: DropReason) {
        let counter = match reason {
            DropReason::Overflow => &self.overflow,
            DropReason::Stale => &self.stale,
            DropReason::Unknown => &self.unknown,
            DropReason::LinkDown => &self.link_down,
        };
        counter.fetch_add(1, AtomicOrdering::Relaxed);
    }

    pub fn snapshot(&self) -> MessagingCounters {
        MessagingCounters {
            delivered: self.delivered.load(AtomicOrdering::Relaxed),
            forwarded: self.forwarded.load(AtomicOrdering::Relaxed),
            dropped_overflow: self.overflow.load(AtomicOrdering::Relaxed),
            dropped_stale: self.stale.load(AtomicOrdering::Relaxed),
            dropped_unknown: self.unknown.load(AtomicOrdering::Relaxed),
            dropped_link: self.link_down.load(AtomicOrdering::Relaxed),
        }
    }
}

struct LocalEntry {
    incarnation: u64,
    mailbox: Arc<Mailbox>,
}

pub struct Messaging {
    node: NodeId,
    naming: Arc<Naming>,
    local: RwLock<HashMap<AtomName, LocalEntry>>,
    outbound: RwLock<Option<Arc<dyn Outbound>>>,
    stats: MessagingStats,
}

impl Messaging {
    pub fn new(naming: Arc<Naming>) -> Self {
        Self {
            node: naming.node().clone(),
            naming,
            local: RwLock::new(HashMap::new()),
            outbound: RwLock::new(None),
            stats: MessagingStats::default(),
        }
    }

    pub fn set_outbound(&self, outbound: Arc<dyn Outbound>) {
        *self.outbound.write() = Some(outbound);
    }

    pub fn stats(&self) -> MessagingCounters {
        self.stats.snapshot()
    }

    /// Makes a local mailbox reachable under `name` at `incarnation`.
    pub fn attach(&self, name: AtomName, incarnation: u64, mailbox: Arc<Mailbox>) {
        self.local.write().insert(
            name,
            LocalEntry {
                incarnation,
                mailbox,
            },
        );
    }

    /// Detaches a mailbox if it is still attached at `incarnation`.
    pub fn detach(&self, name: &AtomName, incarnation: u64) {
        let mut local = self.local.write();
        if local.get(name).is_some_and(|e| e.incarnation == incarnation) {
            local.remove(name);
        }
    }

    /// Non-blocking send: validates, resolves and enqueues each copy.
    /// Returns the number of copies routed.
    pub fn send(&self, envelope: Envelope) -> Result<usize, SendError> {
        if envelope.payload.len() > MAX_PAYLOAD {
            return Err(SendError::PayloadTooLarge(envelope.payload.len()));
        }
        match &envelope.destination {
            DestinationSelector::Exact(name) => {
                let record = self
                    .naming
                    .lookup(name.as_str())
                    .ok_or_else(|| SendError::UnknownDestination(name.clone()))?;
                self.route(record, envelope);
                Ok(1)
            }
            DestinationSelector::AliasAll(alias) => {
                let members = self.naming.alias_members(alias);
                Ok(self.fan_out(&members, envelope))
            }
            DestinationSelector::NameSet(names) => {
                let names = names.clone();
                Ok(self.fan_out(&names, envelope))
            }
        }
    }

    fn fan_out(&self, members: &[AtomName], envelope: Envelope) -> usize {
        let mut routed = 0;
        for member in members {
            match self.naming.lookup(member.as_str()) {
                Some(record) => {
                    self.route(record, envelope.clone());
                    routed += 1;
                }
                None => self.stats.count(DropReason::Unknown),
            }
        }
        routed
    }

    fn route(&self, record: NameRecord, envelope: Envelope) {
        if record.node == self.node {
            let _ = self.deliver_local(&record.name, record.incarnation, envelope);
            return;
        }
        let delivery = RemoteDelivery {
            target: record.name,
            incarnation: record.incarnation,
            envelope,
        };
        let sent = self
            .outbound
            .read()
            .as_ref()
            .is_some_and(|out| out.forward(&record.node, delivery));
        if sent {
            self.stats.forwarded.fetch_add(1, AtomicOrdering::Relaxed);
        } else {
            self.stats.count(DropReason::LinkDown);
        }
    }

    /// Ingress into a local mailbox, from the local router or the wire.
    pub fn deliver_local(
        &self,
        target: &AtomName,
        incarnation: u64,
        envelope: Envelope,
    ) -> Result<(), DropReason> {
        let result = {
            let local = self.local.read();
            match local.get(target) {
                None => Err(DropReason::Unknown),
                Some(entry) if entry.incarnation != incarnation => Err(DropReason::Stale),
                Some(entry) => {
                    let ordering = envelope.ordering;
                    entry
                        .mailbox
                        .push(Inbound::Message(envelope), ordering)
                        .map_err(|e| match e {
                            PushError::Full => DropReason::Overflow,
                            PushError::Closed => DropReason::Unknown,
                        })
                }
            }
        };
        match result {
            Ok(()) => {
                self.stats.delivered.fetch_add(1, AtomicOrdering::Relaxed);
            }
            Err(reason) => self.stats.count(reason),
        }
        result
    }

    /// Counts a delivery the transport had to drop.
    pub fn count_drop(&self, reason: DropReason) {
        self.stats.count(reason);
    }
}
