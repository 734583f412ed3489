//! Radon atom runtime: isolated, single-threaded, message-passing atoms
//! hosted by a node-local runtime and connected across nodes.

pub mod builtins;
pub mod client;
pub mod engine;
pub mod gateway;
pub mod local;
pub mod messaging;
pub mod model;
pub mod naming;
pub mod node;
pub mod storage;
pub mod transport;
