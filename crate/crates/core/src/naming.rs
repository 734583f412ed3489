//! Deployment-wide name registry.
//!
//! Every node keeps a full replicated view of all live names and alias
//! memberships. Writes are owner-authoritative: only the node hosting an
//! instance registers or deregisters its name, and it broadcasts the change
//! to every peer through a [`Propagator`]. Registration completes with a
//! barrier round so the name is visible cluster-wide before `register`
//! returns. Concurrent claims for one name are settled in favour of the
//! lowest node id.

use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use futures::future::BoxFuture;
use parking_lot::{Mutex, RwLock};
use regex::Regex;
use serde::Serialize;
use tokio::sync::mpsc;

use crate::model::{Alias, AtomName, NodeId};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct NameRecord {
    pub name: AtomName,
    pub node: NodeId,
    pub incarnation: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RegistryDelta {
    Register(NameRecord),
    Deregister(NameRecord),
    AliasAdd { alias: Alias, member: AtomName },
    AliasRemove { alias: Alias, member: AtomName },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NameSpace {
    Names,
    Aliases,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum NamingError {
    #[error("name {name} is already live on node {owner}")]
    Conflict { name: AtomName, owner: NodeId },
    #[error("name {0} is not registered")]
    Unknown(AtomName),
    #[error("name {0} is owned by another node")]
    NotOwner(AtomName),
    #[error("invalid query: {0}")]
    InvalidQuery(String),
}

/// Carries registry deltas to peers.
pub trait Propagator: Send + Sync {
    /// Queues a delta for every connected peer. Called with the registry
    /// lock held, so it must not block or call back into [`Naming`].
    fn broadcast(&self, delta: &RegistryDelta);

    /// Resolves once every connected peer has applied all deltas queued
    /// before the call.
    fn barrier(&self) -> BoxFuture<'static, ()>;
}

#[derive(Default)]
struct State {
    names: BTreeMap<AtomName, NameRecord>,
    aliases: BTreeMap<Alias, BTreeSet<AtomName>>,
    incarnations: HashMap<AtomName, u64>,
}

impl State {
    fn prune(&mut self, name: &AtomName) {
        self.aliases.retain(|_, members| {
            members.remove(name);
            !members.is_empty()
        });
    }
}

/// Serializable view of the registry, used for convergence checks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RegistrySnapshot {
    pub names: Vec<NameRecord>,
    pub aliases: BTreeMap<Alias, Vec<AtomName>>,
}

impl RegistrySnapshot {
    pub fn digest(&self) -> u64 {
        let mut hasher = DefaultHasher::new();
        self.hash(&mut hasher);
        hasher.finish()
    }
}

impl Hash for RegistrySnapshot {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.names.hash(state);
        for (alias, members) in &self.aliases {
            alias.hash(state);
            members.hash(state);
        }
    }
}

pub struct Naming {
    node: NodeId,
    state: RwLock<State>,
    propagator: RwLock<Option<Arc<dyn Propagator>>>,
    lost: Mutex<Option<mpsc::UnboundedSender<NameRecord>>>,
    queries: Mutex<HashMap<String, Regex>>,
}

const QUERY_CACHE_LIMIT: usize = 256;

impl Naming {
    pub fn new(node: NodeId) -> Self {
        Self {
            node,
            state: RwLock::new(State::default()),
            propagator: RwLock::new(None),
            lost: Mutex::new(None),
            queries: Mutex::new(HashMap::new()),
        }
    }

    pub fn node(&self) -> &NodeId {
        &self.node
    }

    pub fn set_propagator(&self, propagator: Arc<dyn Propagator>) {
        *self.propagator.write() = Some(propagator);
    }

    /// Channel receiving local records displaced by a remote claim.
    pub fn subscribe_lost(&self) -> mpsc::UnboundedReceiver<NameRecord> {
        let (tx, rx) = mpsc::unbounded_channel();
        *self.lost.lock() = Some(tx);
        rx
    }

    fn broadcast(&self, delta: RegistryDelta) {
        if let Some(propagator) = &*self.propagator.read() {
            propagator.broadcast(&delta);
        }
    }

    async fn barrier(&self) {
        let barrier = self.propagator.read().as_ref().map(|p| p.barrier());
        if let Some(barrier) = barrier {
            barrier.await;
        }
    }

    /// First half of registration: records a local claim and announces it.
    /// Returns the incarnation the name will carry.
    pub fn claim(&self, name: &AtomName) -> Result<u64, NamingError> {
        let mut state = self.state.write();
        if let Some(existing) = state.names.get(name) {
            return Err(NamingError::Conflict {
                name: name.clone(),
                owner: existing.node.clone(),
            });
        }
        let incarnation = {
            let counter = state.incarnations.entry(name.clone()).or_insert(0);
            *counter += 1;
            *counter
        };
        let record = NameRecord {
            name: name.clone(),
            node: self.node.clone(),
            incarnation,
        };
        state.names.insert(name.clone(), record.clone());
        self.broadcast(RegistryDelta::Register(record));
        Ok(incarnation)
    }

    /// Second half of registration: waits for peers to apply the claim and
    /// checks that no lower-id node claimed the name concurrently.
    pub async fn confirm(&self, name: &AtomName, incarnation: u64) -> Result<u64, NamingError> {
        self.barrier().await;
        let state = self.state.read();
        match state.names.get(name) {
            Some(r) if r.node == self.node && r.incarnation == incarnation => Ok(incarnation),
            Some(r) => Err(NamingError::Conflict {
                name: name.clone(),
                owner: r.node.clone(),
            }),
            None => Err(NamingError::Unknown(name.clone())),
        }
    }

    pub async fn register(&self, name: &AtomName) -> Result<u64, NamingError> {
        let incarnation = self.claim(name)?;
        self.confirm(name, incarnation).await
    }

    /// Bumps the incarnation of a locally owned name (restart recovery),
    /// without an intermediate deregistration.
    pub async fn renew(&self, name: &AtomName) -> Result<u64, NamingError> {
        let incarnation = self.reclaim(name)?;
        self.confirm(name, incarnation).await
    }

    /// Synchronous half of [`Naming::renew`].
    pub fn reclaim(&self, name: &AtomName) -> Result<u64, NamingError> {
        {
            let mut state = self.state.write();
            match state.names.get(name) {
                Some(r) if r.node == self.node => {}
                Some(_) => return Err(NamingError::NotOwner(name.clone())),
                None => return Err(NamingError::Unknown(name.clone())),
            }
            let counter = state.incarnations.entry(name.clone()).or_insert(0);
            *counter += 1;
            let incarnation = *counter;
            let record = NameRecord {
                name: name.clone(),
                node: self.node.clone(),
                incarnation,
            };
            state.names.insert(name.clone(), record.clone());
            self.broadcast(RegistryDelta::Register(record));
            Ok(incarnation)
        }
    }

    /// Removes a locally owned name. Unknown names are a logged no-op.
    pub fn deregister(&self, name: &AtomName) -> Result<(), NamingError> {
        let mut state = self.state.write();
        match state.names.get(name) {
            None => {
                tracing::debug!(%name, "deregister of unknown name ignored");
                Ok(())
            }
            Some(r) if r.node != self.node => Err(NamingError::NotOwner(name.clone())),
            Some(_) => {
                let record = state.names.remove(name).expect("checked above");
                state.prune(name);
                self.broadcast(RegistryDelta::Deregister(record));
                Ok(())
            }
        }
    }

    pub fn lookup(&self, name: &str) -> Option<NameRecord> {
        self.state.read().names.get(name).cloned()
    }

    fn compile(&self, query: &str) -> Result<Regex, NamingError> {
        let mut cache = self.queries.lock();
        if let Some(re) = cache.get(query) {
            return Ok(re.clone());
        }
        let re = Regex::new(&format!("^(?:{query})$"))
            .map_err(|e| NamingError::InvalidQuery(e.to_string()))?;
        if cache.len() >= QUERY_CACHE_LIMIT {
            cache.clear();
        }
        cache.insert(query.to_string(), re.clone());
        Ok(re)
    }

    /// Anchored regex query. In the alias space, returns the union of the
    /// members of every matching alias. Results are sorted.
    pub fn resolve(&self, query: &str, space: NameSpace) -> Result<Vec<AtomName>, NamingError> {
        let re = self.compile(query)?;
        let state = self.state.read();
        let found: Vec<AtomName> = match space {
            NameSpace::Names => state
                .names
                .keys()
                .filter(|name| re.is_match(name.as_str()))
                .cloned()
                .collect(),
            NameSpace::Aliases => state
                .aliases
                .iter()
                .filter(|(alias, _)| re.is_match(alias.as_str()))
                .flat_map(|(_, members)| members.iter().cloned())
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect(),
        };
        Ok(found)
    }

    pub fn alias_members(&self, alias: &Alias) -> Vec<AtomName> {
        self.state
            .read()
            .aliases
            .get(alias)
            .map(|m| m.iter().cloned().collect())
            .unwrap_or_default()
    }

    pub fn alias_add(&self, alias: &Alias, member: &AtomName) -> Result<(), NamingError> {
        let mut state = self.state.write();
        if !state.names.contains_key(member) {
            return Err(NamingError::Unknown(member.clone()));
        }
        if state
            .aliases
            .entry(alias.clone())
            .or_default()
            .insert(member.clone())
        {
            self.broadcast(RegistryDelta::AliasAdd {
                alias: alias.clone(),
                member: member.clone(),
            });
        }
        Ok(())
    }

    pub fn alias_remove(&self, alias: &Alias, member: &AtomName) {
        let mut state = self.state.write();
        let Some(members) = state.aliases.get_mut(alias) else {
            return;
        };
        if members.remove(member) {
            if members.is_empty() {
                state.aliases.remove(alias);
            }
            self.broadcast(RegistryDelta::AliasRemove {
                alias: alias.clone(),
                member: member.clone(),
            });
        }
    }

    /// Applies a delta received from `from`. May return a delta to send
    /// back to that peer, re-asserting a local record that won a conflict.
    pub fn apply_remote(&self, from: &NodeId, delta: RegistryDelta) -> Option<RegistryDelta> {
        let mut state = self.state.write();
        match delta {
            RegistryDelta::Register(record) => {
                let Some(existing) = state.names.get(&record.name).cloned() else {
                    state.names.insert(record.name.clone(), record);
                    return None;
                };
                if existing.node == record.node {
                    if record.incarnation >= existing.incarnation {
                        state.names.insert(record.name.clone(), record);
                    }
                    return None;
                }
                if existing.node <= record.node {
                    // Existing owner wins; tell the challenger if we are it.
                    return (existing.node == self.node).then_some(RegistryDelta::Register(existing));
                }
                let displaced_local = existing.node == self.node;
                state.names.insert(record.name.clone(), record);
                drop(state);
                if displaced_local {
                    tracing::warn!(name = %existing.name, winner = %from, "local name lost to a concurrent claim");
                    if let Some(tx) = &*self.lost.lock() {
                        let _ = tx.send(existing);
                    }
                }
                None
            }
            RegistryDelta::Deregister(record) => {
                let matches = state
                    .names
                    .get(&record.name)
                    .is_some_and(|r| r.node == record.node && r.incarnation <= record.incarnation);
                if matches {
                    state.names.remove(&record.name);
                    state.prune(&record.name);
                }
                None
            }
            RegistryDelta::AliasAdd { alias, member } => {
                if state.names.contains_key(&member) {
                    state.aliases.entry(alias).or_default().insert(member);
                }
                None
            }
            RegistryDelta::AliasRemove { alias, member } => {
                if let Some(members) = state.aliases.get_mut(&alias) {
                    members.remove(&member);
                    if members.is_empty() {
                        state.aliases.remove(&alias);
                    }
                }
                None
            }
        }
    }

    /// Drops every record owned by a disconnected node.
    pub fn purge_node(&self, node: &NodeId) {
        let mut state = self.state.write();
        let gone: Vec<AtomName> = state
            .names
            .values()
            .filter(|r| &r.node == node)
            .map(|r| r.name.clone())
            .collect();
        for name in gone {
            state.names.remove(&name);
            state.prune(&name);
        }
    }

    /// Runs `attach` with the deltas describing every locally owned record,
    /// while holding the registry lock so no concurrent delta can slip
    /// between the snapshot and the attachment of a new peer.
    pub fn with_local_snapshot(&self, attach: impl FnOnce(Vec<RegistryDelta>)) {
        let state = self.state.write();
        let mut deltas: Vec<RegistryDelta> = state
            .names
            .values()
            .filter(|r| r.node == self.node)
            .map(|r| RegistryDelta::Register(r.clone()))
            .collect();
        for (alias, members) in &state.aliases {
            for member in members {
                if state.names.get(member).is_some_and(|r| r.node == self.node) {
                    deltas.push(RegistryDelta::AliasAdd {
                        alias: alias.clone(),
                        member: member.clone(),
                    });
                }
            }
        }
        attach(deltas);
    }

    pub fn snapshot(&self) -> RegistrySnapshot {
        let state = self.state.read();
        RegistrySnapshot {
            names: state.names.values().cloned().collect(),
            aliases: state
                .aliases
                .iter()
                .map(|(a, m)| (a.clone(), m.iter().cloned().collect()))
                .collect(),
        }
    }
}
