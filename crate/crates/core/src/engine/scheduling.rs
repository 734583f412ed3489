//! Scheduling strategies for reactive definitions.
//!
//! Each policy is a [`SchedulingStrategy`] registered by name in a
//! [`StrategyRegistry`]; the engine instantiates one strategy per installed
//! reactive definition from the policy named in its configuration.

use std::collections::BTreeMap;
use std::time::Duration;

use crate::model::SchedulingPolicy;

/// Scheduler-visible state of one live instance of a reactive definition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolSlot {
    /// Events assigned and not yet answered.
    pub outstanding: usize,
    pub events_handled: u64,
    pub last_activity: Duration,
}

impl PoolSlot {
    pub fn is_idle(&self) -> bool {
        self.outstanding == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Placement {
    /// Hand the event to the live instance at this index.
    Reuse(usize),
    Spawn,
}

pub trait SchedulingStrategy: Send {
    fn policy(&self) -> SchedulingPolicy;

    /// Chooses the instance for a new event. `live` lists instances in
    /// creation order; expired instances have already been removed.
    fn place(&mut self, live: &[PoolSlot], now: Duration) -> Placement;

    /// Whether an idle instance must be retired.
    fn should_retire(&self, slot: &PoolSlot, now: Duration) -> bool;

    /// Upper bound on concurrently live instances, if any.
    fn max_instances(&self) -> Option<usize> {
        None
    }
}

struct One;

impl SchedulingStrategy for One {
    fn policy(&self) -> SchedulingPolicy {
        SchedulingPolicy::One
    }

    fn place(&mut self, live: &[PoolSlot], _now: Duration) -> Placement {
        if live.is_empty() {
            Placement::Spawn
        } else {
            Placement::Reuse(0)
        }
    }

    fn should_retire(&self, _slot: &PoolSlot, _now: Duration) -> bool {
        false
    }

    fn max_instances(&self) -> Option<usize> {
        Some(1)
    }
}

struct RoundRobin {
    limit: usize,
    cursor: usize,
}

impl SchedulingStrategy for RoundRobin {
    fn policy(&self) -> SchedulingPolicy {
        SchedulingPolicy::RoundRobin {
            limit: self.limit as u32,
        }
    }

    fn place(&mut self, live: &[PoolSlot], _now: Duration) -> Placement {
        let turn = self.cursor;
        self.cursor = self.cursor.wrapping_add(1);
        if live.len() < self.limit {
            Placement::Spawn
        } else {
            Placement::Reuse(turn % live.len())
        }
    }

    fn should_retire(&self, _slot: &PoolSlot, _now: Duration) -> bool {
        false
    }

    fn max_instances(&self) -> Option<usize> {
        Some(self.limit)
    }
}

struct OnDemand;

impl SchedulingStrategy for OnDemand {
    fn policy(&self) -> SchedulingPolicy {
        SchedulingPolicy::OnDemand
    }

    fn place(&mut self, _live: &[PoolSlot], _now: Duration) -> Placement {
        Placement::Spawn
    }

    fn should_retire(&self, slot: &PoolSlot, _now: Duration) -> bool {
        slot.is_idle() && slot.events_handled > 0
    }
}

struct OnDemandExpire {
    idle_timeout: Option<Duration>,
    max_events: Option<u64>,
}

impl OnDemandExpire {
    fn expired(&self, slot: &PoolSlot, now: Duration) -> bool {
        let worn_out = self.max_events.is_some_and(|max| slot.events_handled >= max);
        let stale = self
            .idle_timeout
            .is_some_and(|timeout| now.saturating_sub(slot.last_activity) >= timeout);
        worn_out || stale
    }
}

impl SchedulingStrategy for OnDemandExpire {
    fn policy(&self) -> SchedulingPolicy {
        SchedulingPolicy::OnDemandExpire {
            idle_timeout: self.idle_timeout,
            max_events: self.max_events,
        }
    }

    // Least-recently-active idle instance; ties go to the older instance.
    fn place(&mut self, live: &[PoolSlot], now: Duration) -> Placement {
        live.iter()
            .enumerate()
            .filter(|(_, slot)| slot.is_idle() && !self.expired(slot, now))
            .min_by_key(|(index, slot)| (slot.last_activity, *index))
            .map_or(Placement::Spawn, |(index, _)| Placement::Reuse(index))
    }

    fn should_retire(&self, slot: &PoolSlot, now: Duration) -> bool {
        slot.is_idle() && self.expired(slot, now)
    }
}

pub type StrategyFactory = fn(&SchedulingPolicy) -> Box<dyn SchedulingStrategy>;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum StrategyError {
    #[error("no scheduling strategy registered as {0:?}")]
    Unknown(String),
    #[error("scheduling strategy {0:?} already registered")]
    Duplicate(String),
}

/// Name-keyed table of strategy constructors.
pub struct StrategyRegistry {
    factories: BTreeMap<String, StrategyFactory>,
}

impl StrategyRegistry {
    pub fn empty() -> Self {
        Self {
            factories: BTreeMap::new(),
        }
    }

    /// Registry holding the four built-in policies.
    pub fn builtin() -> Self {
        let mut registry = Self::empty();
        let builtins: [(&str, StrategyFactory); 4] = [
            ("one", |_| Box::new(One)),
            ("round-robin", |policy| match policy {
                SchedulingPolicy::RoundRobin { limit } => Box::new(RoundRobin {
                    limit: (*limit).max(1) as usize,
                    cursor: 0,
                }),
                _ => unreachable!("round-robin factory given {policy:?}"),
            }),
            ("on-demand", |_| Box::new(OnDemand)),
            ("on-demand-expire", |policy| match policy {
                SchedulingPolicy::OnDemandExpire {
                    idle_timeout,
                    max_events,
                } => Box::new(OnDemandExpire {
                    idle_timeout: *idle_timeout,
                    max_events: *max_events,
                }),
                _ => unreachable!("on-demand-expire factory given {policy:?}"),
            }),
        ];
        for (name, factory) in builtins {
            registry.register(name, factory).expect("distinct builtin names");
        }
        registry
    }

    pub fn register(&mut self, name: &str, factory: StrategyFactory) -> Result<(), StrategyError> {
        if self.factories.contains_key(name) {
            return Err(StrategyError::Duplicate(name.to_string()));
        }
        self.factories.insert(name.to_string(), factory);
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }

    pub fn create(
        &self,
        policy: &SchedulingPolicy,
    ) -> Result<Box<dyn SchedulingStrategy>, StrategyError> {
        let name = policy.strategy_name();
        let factory = self
            .factories
            .get(name)
            .ok_or_else(|| StrategyError::Unknown(name.to_string()))?;
        Ok(factory(policy))
    }
}

impl Default for StrategyRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}
