//! Domain vocabulary shared by the whole runtime: names, configurations,
//! policies, envelopes and external events.

mod config;

use std::borrow::Borrow;
use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use bytes::Bytes;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub use config::{
    parse_configuration, parse_duration, render_configuration, AtomConfiguration, ConfigError,
    DaemonName, HostConstraint,
};

/// Longest accepted atom name or alias, in bytes. Names travel in wire
/// frames behind a one-byte length.
pub const MAX_NAME_LEN: usize = 255;

/// Largest payload accepted by `send`.
pub const MAX_PAYLOAD: usize = 4 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum NameError {
    #[error("name is empty")]
    Empty,
    #[error("name is {0} bytes long, the limit is 255")]
    TooLong(usize),
    #[error("illegal character {0:?} in name")]
    IllegalChar(char),
}

fn check_name(candidate: &str) -> Result<(), NameError> {
    if candidate.is_empty() {
        return Err(NameError::Empty);
    }
    if candidate.len() > MAX_NAME_LEN {
        return Err(NameError::TooLong(candidate.len()));
    }
    match candidate
        .chars()
        .find(|c| !(c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-' | '/')))
    {
        Some(c) => Err(NameError::IllegalChar(c)),
        None => Ok(()),
    }
}

macro_rules! name_type {
    ($(#[$meta:meta])* $ty:ident) => {
        $(#[$meta])*
        #[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub struct $ty(Arc<str>);

        impl $ty {
            pub fn new(candidate: &str) -> Result<Self, NameError> {
                check_name(candidate)?;
                Ok(Self(Arc::from(candidate)))
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl fmt::Debug for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{:?}", &*self.0)
            }
        }

        impl Borrow<str> for $ty {
            fn borrow(&self) -> &str {
                &self.0
            }
        }

        impl AsRef<str> for $ty {
            fn as_ref(&self) -> &str {
                &self.0
            }
        }

        impl std::str::FromStr for $ty {
            type Err = NameError;
            fn from_str(s: &str) -> Result<Self, Self::Err> {
                Self::new(s)
            }
        }

        impl Serialize for $ty {
            fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
                serializer.serialize_str(&self.0)
            }
        }

        impl<'de> Deserialize<'de> for $ty {
            fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
                let raw = String::deserialize(deserializer)?;
                Self::new(&raw).map_err(serde::de::Error::custom)
            }
        }
    };
}

name_type!(
    /// Deployment-wide unique identifier of a live atom instance.
    AtomName
);
name_type!(
    /// Indirection name resolving to zero or more atom names.
    Alias
);
name_type!(
    /// Identifier of a runtime node. Follows the atom name alphabet because
    /// it is embedded in generated instance names.
    NodeId
);

/// Validates a candidate atom name against the lexical rules.
pub fn validate_name(candidate: &str) -> Result<AtomName, NameError> {
    AtomName::new(candidate)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AtomKind {
    Daemon,
    Reactive,
}

/// How events directed at a reactive definition are mapped onto instances.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum SchedulingPolicy {
    One,
    RoundRobin { limit: u32 },
    OnDemand,
    OnDemandExpire {
        idle_timeout: Option<Duration>,
        max_events: Option<u64>,
    },
}

impl SchedulingPolicy {
    /// Registry key of the strategy implementing this policy.
    pub fn strategy_name(&self) -> &'static str {
        match self {
            SchedulingPolicy::One => "one",
            SchedulingPolicy::RoundRobin { .. } => "round-robin",
            SchedulingPolicy::OnDemand => "on-demand",
            SchedulingPolicy::OnDemandExpire { .. } => "on-demand-expire",
        }
    }

    pub(crate) fn check(&self) -> Result<(), String> {
        match self {
            SchedulingPolicy::RoundRobin { limit: 0 } => {
                Err("round-robin limit must be at least 1".into())
            }
            SchedulingPolicy::OnDemandExpire {
                idle_timeout: None,
                max_events: None,
            } => Err("on-demand-expire needs idle_timeout or max_events".into()),
            SchedulingPolicy::OnDemandExpire {
                max_events: Some(0),
                ..
            } => Err("max_events must be positive".into()),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecoveryPolicy {
    #[default]
    None,
    Escalate,
    Restart,
    Recover,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventRoute {
    pub method: String,
    pub path_prefix: String,
}

impl EventRoute {
    pub fn new(method: &str, path_prefix: &str) -> Self {
        Self {
            method: method.to_ascii_uppercase(),
            path_prefix: path_prefix.to_string(),
        }
    }

    /// Segment-aware prefix match: `/kv` matches `/kv` and `/kv/x`, not `/kvx`.
    pub fn matches(&self, method: &str, path: &str) -> bool {
        if !self.method.eq_ignore_ascii_case(method) {
            return false;
        }
        let prefix = self.path_prefix.as_str();
        match path.strip_prefix(prefix) {
            Some(rest) => prefix.ends_with('/') || rest.is_empty() || rest.starts_with(['/', '?']),
            None => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Ordering {
    Unordered,
    Fifo,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum DestinationSelector {
    Exact(AtomName),
    AliasAll(Alias),
    NameSet(Vec<AtomName>),
}

impl From<AtomName> for DestinationSelector {
    fn from(name: AtomName) -> Self {
        DestinationSelector::Exact(name)
    }
}

/// A routed message as seen by the receiving guest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub sender: AtomName,
    pub destination: DestinationSelector,
    pub ordering: Ordering,
    pub payload: Bytes,
    pub correlation_id: Option<u128>,
}

/// Node-unique handle of an external event awaiting its response.
pub type EventId = u64;

/// External stimulus (an HTTP request) delivered to a reactive atom.
///
/// The reply channel is held by the engine; guests complete an event by
/// calling `respond` with its id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Event {
    pub id: EventId,
    pub method: String,
    pub path: String,
    pub headers: Vec<(String, String)>,
    pub body: Bytes,
}

impl Event {
    pub fn new(method: &str, path: &str, body: impl Into<Bytes>) -> Self {
        Self {
            id: 0,
            method: method.to_string(),
            path: path.to_string(),
            headers: Vec::new(),
            body: body.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventResponse {
    pub status: u16,
    pub body: Bytes,
}

/// What a guest `receive` hands back: a message or an event routed to an
/// already running reactive instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Inbound {
    Message(Envelope),
    Event(Event),
}
