//! Distributed key-value store made of three atom definitions: a
//! `coordinator` daemon owning ring membership, `kvnode` daemons storing
//! replicated partitions and a reactive `kvfrontend` translating HTTP
//! requests into ring messages.

pub mod app;
pub mod coordinator;
pub mod frontend;
pub mod kvnode;
pub mod protocol;
pub mod ring;

pub use app::{application, definitions, placements, validate_replication};
pub use ring::{ring_hash, RingView};
