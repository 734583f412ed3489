use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use async_trait::async_trait;
use parking_lot::RwLock;

use super::{AtomContext, EngineError};
use crate::model::Event;

/// Unrecoverable guest error. Any error type converts into a fault, so
/// guests can propagate runtime errors with `?`.
pub struct Fault {
    message: String,
}

impl Fault {
    pub fn new(message: impl Into<String>) -> Self {
        Self {
            message: message.into(),
        }
    }

    pub fn message(&self) -> &str {
        &self.message
    }

    pub(crate) fn from_panic(payload: Box<dyn std::any::Any + Send>) -> Self {
        let message = payload
            .downcast_ref::<&str>()
            .map(|s| s.to_string())
            .or_else(|| payload.downcast_ref::<String>().cloned())
            .unwrap_or_else(|| "guest panicked".to_string());
        Self::new(format!("trap: {message}"))
    }
}

impl<E: std::error::Error> From<E> for Fault {
    fn from(err: E) -> Self {
        Self::new(err.to_string())
    }
}

impl fmt::Display for Fault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl fmt::Debug for Fault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Fault({:?})", self.message)
    }
}

pub type GuestResult<T = ()> = Result<T, Fault>;

/// Guest contract. `main` is the activation entry point; reactive instances
/// get the event that caused their creation as `initial`. A panic or an
/// `Err` return is a trap and triggers the configured recovery policy.
#[async_trait]
pub trait Behavior: Send + Sync + 'static {
    async fn main(&self, ctx: &mut AtomContext, initial: Option<Event>) -> GuestResult;

    fn has_recover_hook(&self) -> bool {
        false
    }

    /// Recovery operations run by the `recover` policy in a fresh
    /// activation before the instance is restarted.
    async fn recover(&self, _ctx: &mut AtomContext) -> GuestResult {
        Ok(())
    }
}

/// A behavior registered under a definition name.
#[derive(Clone)]
pub struct AtomDefinition {
    pub name: String,
    pub behavior: Arc<dyn Behavior>,
}

impl AtomDefinition {
    pub fn new(name: &str, behavior: impl Behavior) -> Self {
        Self {
            name: name.to_string(),
            behavior: Arc::new(behavior),
        }
    }
}

/// Execution substrate: resolves definition names to runnable behaviors.
pub trait ModuleEngine: Send + Sync {
    fn register(&self, definition: AtomDefinition) -> Result<(), EngineError>;
    fn load(&self, definition: &str) -> Option<Arc<dyn Behavior>>;
    fn definitions(&self) -> Vec<String>;
}

/// Behaviors compiled into the node binary, selected by name.
#[derive(Default)]
pub struct InProcessEngine {
    table: RwLock<BTreeMap<String, Arc<dyn Behavior>>>,
}

impl InProcessEngine {
    pub fn new() -> Self {
        Self::default()
    }
}

impl ModuleEngine for InProcessEngine {
    fn register(&self, definition: AtomDefinition) -> Result<(), EngineError> {
        let mut table = self.table.write();
        if table.contains_key(&definition.name) {
            return Err(EngineError::DuplicateDefinition(definition.name));
        }
        table.insert(definition.name, definition.behavior);
        Ok(())
    }

    fn load(&self, definition: &str) -> Option<Arc<dyn Behavior>> {
        self.table.read().get(definition).cloned()
    }

    fn definitions(&self) -> Vec<String> {
        self.table.read().keys().cloned().collect()
    }
}
