//! Atom lifecycle on one node: daemon spawning, event dispatch through the
//! scheduling strategies, and fault handling per recovery policy.
//!
//! Every instance is one tokio task. A guest blocked in `receive` is a
//! suspended future and holds no worker thread.

pub mod behavior;
pub mod clock;
mod context;
pub mod scheduling;

use std::collections::{BTreeSet, HashMap};
use std::panic::AssertUnwindSafe;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicU8, Ordering as AtomicOrdering};
use std::sync::{Arc, Weak};
use std::time::Duration;

use futures::FutureExt;
use parking_lot::{Mutex, RwLock};
use serde::Serialize;
use tokio::sync::{oneshot, watch};

pub use behavior::{AtomDefinition, Behavior, Fault, GuestResult, InProcessEngine, ModuleEngine};
pub use clock::{Clock, ManualClock, SystemClock};
pub use context::{AtomContext, RuntimeError};
pub use scheduling::{
    Placement, PoolSlot, SchedulingStrategy, StrategyError, StrategyFactory, StrategyRegistry,
};

use crate::messaging::{Mailbox, Messaging, DEFAULT_MAILBOX_CAPACITY};
use crate::model::{
    AtomConfiguration, AtomKind, AtomName, Event, EventId, EventResponse, EventRoute, Inbound,
    NameError, NodeId, Ordering, RecoveryPolicy,
};
use crate::naming::{NameRecord, Naming, NamingError};
use crate::storage::Storage;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EngineError {
    #[error("definition {0:?} is already registered")]
    DuplicateDefinition(String),
    #[error("unknown definition {0:?}")]
    UnknownDefinition(String),
    #[error("definition {0:?} is not installed as reactive on this node")]
    NotReactive(String),
    #[error("configuration of {0:?} has the wrong kind for this operation")]
    WrongKind(String),
    #[error("node {node} does not satisfy the host constraints of {definition:?}")]
    HostMismatch { definition: String, node: NodeId },
    #[error("name {name} is already live on node {owner}")]
    NameConflict { name: AtomName, owner: NodeId },
    #[error("naming: {0}")]
    Naming(NamingError),
    #[error("invalid instance name: {0}")]
    InvalidName(#[from] NameError),
    #[error(transparent)]
    Strategy(#[from] StrategyError),
    #[error("route {method} {prefix} is already installed for {existing:?}")]
    RouteConflict {
        method: String,
        prefix: String,
        existing: String,
    },
    #[error("definition {0:?} is already installed with a different configuration")]
    AlreadyInstalled(String),
    #[error("mailbox of {0} is full")]
    Overloaded(AtomName),
    #[error("engine is stopped")]
    Stopped,
}

impl From<NamingError> for EngineError {
    fn from(err: NamingError) -> Self {
        match err {
            NamingError::Conflict { name, owner } => EngineError::NameConflict { name, owner },
            other => EngineError::Naming(other),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum InstanceState {
    Starting,
    Idle,
    Busy,
    Stopped,
    Faulted,
}

impl InstanceState {
    fn from_u8(v: u8) -> Self {
        match v {
            0 => InstanceState::Starting,
            1 => InstanceState::Idle,
            2 => InstanceState::Busy,
            3 => InstanceState::Stopped,
            _ => InstanceState::Faulted,
        }
    }
}

/// Why the engine stopped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HaltReason {
    Escalated(AtomName),
    Shutdown,
}

struct Activity {
    slot: PoolSlot,
    pending: HashMap<EventId, oneshot::Sender<EventResponse>>,
}

pub(crate) struct InstanceCell {
    name: AtomName,
    definition: String,
    config: Arc<AtomConfiguration>,
    ordinal: u64,
    incarnation: AtomicU64,
    state: AtomicU8,
    mailbox: Mutex<Arc<Mailbox>>,
    activity: Mutex<Activity>,
    pool: Option<Weak<ReactivePool>>,
    retired: AtomicBool,
    terminated: AtomicBool,
    lost: AtomicBool,
    active: AtomicBool,
    task: Mutex<Option<tokio::task::AbortHandle>>,
}

impl InstanceCell {
    fn incarnation(&self) -> u64 {
        self.incarnation.load(AtomicOrdering::SeqCst)
    }

    fn state(&self) -> InstanceState {
        InstanceState::from_u8(self.state.load(AtomicOrdering::SeqCst))
    }

    fn set_state(&self, state: InstanceState) {
        self.state.store(state as u8, AtomicOrdering::SeqCst);
    }

    fn is_terminated(&self) -> bool {
        self.terminated.load(AtomicOrdering::SeqCst)
    }

    fn slot(&self) -> PoolSlot {
        self.activity.lock().slot
    }

    fn info(&self) -> InstanceInfo {
        let slot = self.slot();
        InstanceInfo {
            name: self.name.clone(),
            definition: self.definition.clone(),
            ordinal: self.ordinal,
            incarnation: self.incarnation(),
            state: self.state(),
            events_handled: slot.events_handled,
            outstanding: slot.outstanding,
        }
    }
}

/// Point-in-time description of one instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct InstanceInfo {
    pub name: AtomName,
    pub definition: String,
    /// Creation order within the definition's pool, starting at 1.
    pub ordinal: u64,
    pub incarnation: u64,
    pub state: InstanceState,
    pub events_handled: u64,
    pub outstanding: usize,
}

struct PoolState {
    strategy: Box<dyn SchedulingStrategy>,
    live: Vec<Arc<InstanceCell>>,
    created: u64,
}

struct ReactivePool {
    config: Arc<AtomConfiguration>,
    behavior: Arc<dyn Behavior>,
    state: Mutex<PoolState>,
}

struct InstalledRoute {
    route: EventRoute,
    definition: String,
}

/// Handle on a dispatched event.
#[derive(Debug)]
pub struct DispatchTicket {
    pub instance: AtomName,
    pub ordinal: u64,
    pub event: EventId,
    /// Resolves with the guest response; closed if the instance faulted.
    pub response: oneshot::Receiver<EventResponse>,
}

#[derive(Default)]
struct Counters {
    spawned: AtomicU64,
    exited: AtomicU64,
    expired: AtomicU64,
    faulted: AtomicU64,
    restarted: AtomicU64,
    reentrancy_violations: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, serde::Deserialize)]
pub struct EngineStats {
    pub spawned: u64,
    pub exited: u64,
    pub expired: u64,
    pub faulted: u64,
    pub restarted: u64,
    pub reentrancy_violations: u64,
}

pub struct EngineOptions {
    pub clock: Arc<dyn Clock>,
    pub strategies: StrategyRegistry,
    /// Period of the background sweep retiring expired instances. `None`
    /// leaves retirement to dispatch and respond.
    pub reaper_interval: Option<Duration>,
    pub mailbox_capacity: usize,
}

impl Default for EngineOptions {
    fn default() -> Self {
        Self {
            clock: Arc::new(SystemClock::new()),
            strategies: StrategyRegistry::builtin(),
            reaper_interval: Some(Duration::from_millis(250)),
            mailbox_capacity: DEFAULT_MAILBOX_CAPACITY,
        }
    }
}

pub(crate) struct Core {
    node: NodeId,
    tags: BTreeSet<String>,
    naming: Arc<Naming>,
    messaging: Arc<Messaging>,
    storage: Arc<Storage>,
    modules: Arc<dyn ModuleEngine>,
    strategies: StrategyRegistry,
    clock: Arc<dyn Clock>,
    mailbox_capacity: usize,
    pools: RwLock<HashMap<String, Arc<ReactivePool>>>,
    routes: RwLock<Vec<InstalledRoute>>,
    daemons: Mutex<HashMap<AtomName, Arc<InstanceCell>>>,
    next_event: AtomicU64,
    next_suffix: AtomicU64,
    counters: Counters,
    halted: watch::Sender<Option<HaltReason>>,
}

fn lifecycle(event: &str, name: &AtomName, definition: &str) {
    tracing::info!(
        target: "radon::lifecycle",
        "event={event} atom={name} def={definition} t={}",
        chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
    );
}

impl Core {
    fn is_halted(&self) -> bool {
        self.halted.borrow().is_some()
    }

    fn new_cell(
        &self,
        name: AtomName,
        config: Arc<AtomConfiguration>,
        ordinal: u64,
        incarnation: u64,
        pool: Option<Weak<ReactivePool>>,
        now: Duration,
    ) -> Arc<InstanceCell> {
        Arc::new(InstanceCell {
            name,
            definition: config.definition.clone(),
            config,
            ordinal,
            incarnation: AtomicU64::new(incarnation),
            state: AtomicU8::new(InstanceState::Starting as u8),
            mailbox: Mutex::new(Arc::new(Mailbox::new(self.mailbox_capacity))),
            activity: Mutex::new(Activity {
                slot: PoolSlot {
                    outstanding: 0,
                    events_handled: 0,
                    last_activity: now,
                },
                pending: HashMap::new(),
            }),
            pool,
            retired: AtomicBool::new(false),
            terminated: AtomicBool::new(false),
            lost: AtomicBool::new(false),
            active: AtomicBool::new(false),
            task: Mutex::new(None),
        })
    }

    /// Retires a pool member chosen by its strategy. The pool lock must be
    /// held by the caller, which has already removed the cell from `live`.
    fn retire(&self, cell: &Arc<InstanceCell>) {
        if cell.retired.swap(true, AtomicOrdering::SeqCst) {
            return;
        }
        cell.mailbox.lock().close();
        self.counters.expired.fetch_add(1, AtomicOrdering::Relaxed);
        lifecycle("expire", &cell.name, &cell.definition);
    }

    fn sweep(&self, state: &mut PoolState, now: Duration) {
        let mut index = 0;
        while index < state.live.len() {
            let cell = &state.live[index];
            if cell.is_terminated() {
                state.live.remove(index);
            } else if state.strategy.should_retire(&cell.slot(), now) {
                let cell = state.live.remove(index);
                self.retire(&cell);
            } else {
                index += 1;
            }
        }
    }

    /// Final transition of an instance. Idempotent.
    fn teardown(&self, cell: &Arc<InstanceCell>, state: InstanceState, event: Option<&str>) {
        if cell.terminated.swap(true, AtomicOrdering::SeqCst) {
            return;
        }
        cell.set_state(state);
        cell.mailbox.lock().close();
        {
            let mut activity = cell.activity.lock();
            activity.pending.clear();
            activity.slot.outstanding = 0;
        }
        match cell.pool.as_ref().and_then(Weak::upgrade) {
            Some(pool) => pool.state.lock().live.retain(|c| !Arc::ptr_eq(c, cell)),
            None => {
                let mut daemons = self.daemons.lock();
                if daemons.get(&cell.name).is_some_and(|c| Arc::ptr_eq(c, cell)) {
                    daemons.remove(&cell.name);
                }
            }
        }
        self.messaging.detach(&cell.name, cell.incarnation());
        if !cell.lost.load(AtomicOrdering::SeqCst) {
            let _ = self.naming.deregister(&cell.name);
        }
        if let Some(event) = event {
            if event == "exit" {
                self.counters.exited.fetch_add(1, AtomicOrdering::Relaxed);
            }
            lifecycle(event, &cell.name, &cell.definition);
        }
    }

    /// Records a guest response. Pool state is updated before the waiting
    /// side is woken so the next placement sees it.
    fn respond(&self, cell: &Arc<InstanceCell>, event: EventId, response: EventResponse) -> bool {
        let now = self.clock.now();
        let pool = cell.pool.as_ref().and_then(Weak::upgrade);
        let mut pool_state = pool.as_ref().map(|p| p.state.lock());
        let (sender, slot) = {
            let mut activity = cell.activity.lock();
            let Some(sender) = activity.pending.remove(&event) else {
                return false;
            };
            activity.slot.outstanding -= 1;
            activity.slot.events_handled += 1;
            activity.slot.last_activity = now;
            (sender, activity.slot)
        };
        if let Some(state) = pool_state.as_mut() {
            if state.strategy.should_retire(&slot, now) {
                if let Some(index) = state.live.iter().position(|c| Arc::ptr_eq(c, cell)) {
                    let cell = state.live.remove(index);
                    self.retire(&cell);
                }
            }
        }
        drop(pool_state);
        let _ = sender.send(response);
        true
    }

    fn halt(&self, reason: HaltReason) {
        let first = self.halted.send_if_modified(|current| {
            if current.is_some() {
                return false;
            }
            *current = Some(reason);
            true
        });
        if !first {
            return;
        }
        let mut cells: Vec<Arc<InstanceCell>> = self.daemons.lock().values().cloned().collect();
        for pool in self.pools.read().values() {
            cells.extend(pool.state.lock().live.iter().cloned());
        }
        for cell in cells {
            self.teardown(&cell, InstanceState::Stopped, Some("exit"));
            let task = cell.task.lock().take();
            if let Some(task) = task {
                task.abort();
            }
        }
    }

    fn find_cell(&self, name: &AtomName) -> Option<Arc<InstanceCell>> {
        if let Some(cell) = self.daemons.lock().get(name) {
            return Some(cell.clone());
        }
        self.pools.read().values().find_map(|pool| {
            pool.state
                .lock()
                .live
                .iter()
                .find(|c| &c.name == name)
                .cloned()
        })
    }

    fn on_name_lost(&self, record: NameRecord) {
        let Some(cell) = self.find_cell(&record.name) else {
            return;
        };
        if cell.incarnation() != record.incarnation {
            return;
        }
        cell.lost.store(true, AtomicOrdering::SeqCst);
        self.teardown(&cell, InstanceState::Stopped, Some("exit"));
        let task = cell.task.lock().take();
        if let Some(task) = task {
            task.abort();
        }
    }

    /// Runs one guest activation with trap isolation.
    async fn activate<'a, F>(&self, cell: &InstanceCell, activation: F) -> Result<(), Fault>
    where
        F: std::future::Future<Output = GuestResult> + Send + 'a,
    {
        if cell.active.swap(true, AtomicOrdering::SeqCst) {
            self.counters
                .reentrancy_violations
                .fetch_add(1, AtomicOrdering::Relaxed);
        }
        cell.set_state(InstanceState::Busy);
        let outcome = AssertUnwindSafe(activation).catch_unwind().await;
        cell.active.store(false, AtomicOrdering::SeqCst);
        match outcome {
            Ok(result) => result,
            Err(panic) => Err(Fault::from_panic(panic)),
        }
    }

    async fn restart(&self, cell: &Arc<InstanceCell>) -> Result<(), EngineError> {
        let fresh = Arc::new(Mailbox::new(self.mailbox_capacity));
        let old = std::mem::replace(&mut *cell.mailbox.lock(), fresh.clone());
        old.close();
        let incarnation = self.naming.reclaim(&cell.name)?;
        cell.incarnation.store(incarnation, AtomicOrdering::SeqCst);
        self.messaging.attach(cell.name.clone(), incarnation, fresh);
        {
            let mut activity = cell.activity.lock();
            activity.pending.clear();
            activity.slot = PoolSlot {
                outstanding: 0,
                events_handled: 0,
                last_activity: self.clock.now(),
            };
        }
        self.naming.confirm(&cell.name, incarnation).await?;
        self.counters.restarted.fetch_add(1, AtomicOrdering::Relaxed);
        lifecycle("restart", &cell.name, &cell.definition);
        Ok(())
    }
}

async fn run_instance(
    core: Arc<Core>,
    cell: Arc<InstanceCell>,
    behavior: Arc<dyn Behavior>,
    mut initial: Option<Event>,
    confirm: bool,
) {
    if confirm {
        if let Err(err) = core.naming.confirm(&cell.name, cell.incarnation()).await {
            tracing::warn!(atom = %cell.name, "registration failed: {err}");
            cell.lost.store(true, AtomicOrdering::SeqCst);
            core.teardown(&cell, InstanceState::Faulted, Some("fault"));
            return;
        }
    }
    loop {
        if cell.is_terminated() {
            return;
        }
        let mut ctx = AtomContext::new(core.clone(), cell.clone());
        let outcome = core
            .activate(&cell, behavior.main(&mut ctx, initial.take()))
            .await;
        drop(ctx);
        let fault = match outcome {
            Ok(()) => {
                let event = (!cell.retired.load(AtomicOrdering::SeqCst)).then_some("exit");
                core.teardown(&cell, InstanceState::Stopped, event);
                return;
            }
            Err(fault) => fault,
        };
        if cell.is_terminated() || cell.retired.load(AtomicOrdering::SeqCst) {
            core.teardown(&cell, InstanceState::Stopped, None);
            return;
        }
        core.counters.faulted.fetch_add(1, AtomicOrdering::Relaxed);
        tracing::error!(atom = %cell.name, "guest fault: {fault}");
        lifecycle("fault", &cell.name, &cell.definition);
        cell.activity.lock().pending.clear();
        let recovered = match cell.config.recovery {
            RecoveryPolicy::None => false,
            RecoveryPolicy::Escalate => {
                core.halt(HaltReason::Escalated(cell.name.clone()));
                return;
            }
            RecoveryPolicy::Restart => true,
            RecoveryPolicy::Recover => {
                if behavior.has_recover_hook() {
                    let mut ctx = AtomContext::new(core.clone(), cell.clone());
                    let hook = core.activate(&cell, behavior.recover(&mut ctx)).await;
                    match hook {
                        Ok(()) => true,
                        Err(err) => {
                            tracing::error!(atom = %cell.name, "recover hook failed: {err}");
                            false
                        }
                    }
                } else {
                    true
                }
            }
        };
        if !recovered {
            core.teardown(&cell, InstanceState::Faulted, None);
            return;
        }
        if let Err(err) = core.restart(&cell).await {
            tracing::error!(atom = %cell.name, "restart failed: {err}");
            cell.lost.store(matches!(err, EngineError::NameConflict { .. }), AtomicOrdering::SeqCst);
            core.teardown(&cell, InstanceState::Faulted, None);
            return;
        }
    }
}

/// Node-local atom runtime.
#[derive(Clone)]
pub struct Engine {
    core: Arc<Core>,
}

impl Engine {
    /// Must be called inside a tokio runtime.
    pub fn new(
        tags: BTreeSet<String>,
        naming: Arc<Naming>,
        messaging: Arc<Messaging>,
        storage: Arc<Storage>,
        modules: Arc<dyn ModuleEngine>,
        options: EngineOptions,
    ) -> Self {
        let (halted, _) = watch::channel(None);
        let core = Arc::new(Core {
            node: naming.node().clone(),
            tags,
            naming: naming.clone(),
            messaging,
            storage,
            modules,
            strategies: options.strategies,
            clock: options.clock,
            mailbox_capacity: options.mailbox_capacity,
            pools: RwLock::new(HashMap::new()),
            routes: RwLock::new(Vec::new()),
            daemons: Mutex::new(HashMap::new()),
            next_event: AtomicU64::new(1),
            next_suffix: AtomicU64::new(1),
            counters: Counters::default(),
            halted,
        });

        let mut lost = naming.subscribe_lost();
        let weak = Arc::downgrade(&core);
        tokio::spawn(async move {
            while let Some(record) = lost.recv().await {
                let Some(core) = weak.upgrade() else { return };
                core.on_name_lost(record);
            }
        });

        if let Some(period) = options.reaper_interval {
            let weak = Arc::downgrade(&core);
            tokio::spawn(async move {
                let mut ticker = tokio::time::interval(period);
                ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
                loop {
                    ticker.tick().await;
                    let Some(core) = weak.upgrade() else { return };
                    if core.is_halted() {
                        return;
                    }
                    let now = core.clock.now();
                    let pools: Vec<_> = core.pools.read().values().cloned().collect();
                    for pool in pools {
                        core.sweep(&mut pool.state.lock(), now);
                    }
                }
            });
        }
        Self { core }
    }

    pub fn node(&self) -> &NodeId {
        &self.core.node
    }

    pub fn tags(&self) -> &BTreeSet<String> {
        &self.core.tags
    }

    pub fn naming(&self) -> &Arc<Naming> {
        &self.core.naming
    }

    pub fn messaging(&self) -> &Arc<Messaging> {
        &self.core.messaging
    }

    pub fn storage(&self) -> &Arc<Storage> {
        &self.core.storage
    }

    pub fn register_definition(&self, definition: AtomDefinition) -> Result<(), EngineError> {
        self.core.modules.register(definition)
    }

    pub fn definitions(&self) -> Vec<String> {
        self.core.modules.definitions()
    }

    fn check_placement(&self, config: &AtomConfiguration) -> Result<Arc<dyn Behavior>, EngineError> {
        if self.core.is_halted() {
            return Err(EngineError::Stopped);
        }
        if !config.hosts.admits(self.core.node.as_str(), &self.core.tags) {
            return Err(EngineError::HostMismatch {
                definition: config.definition.clone(),
                node: self.core.node.clone(),
            });
        }
        self.core
            .modules
            .load(&config.definition)
            .ok_or_else(|| EngineError::UnknownDefinition(config.definition.clone()))
    }

    /// Starts a daemon instance. Returns once the name is registered
    /// cluster-wide.
    pub async fn spawn_daemon(&self, config: AtomConfiguration) -> Result<AtomName, EngineError> {
        if config.kind != AtomKind::Daemon {
            return Err(EngineError::WrongKind(config.definition.clone()));
        }
        let behavior = self.check_placement(&config)?;
        let template = config
            .name
            .as_ref()
            .ok_or_else(|| EngineError::WrongKind(config.definition.clone()))?;
        let name = template.resolve(self.core.node.as_str())?;
        let core = &self.core;
        let incarnation = core.naming.claim(&name)?;
        let cell = core.new_cell(
            name.clone(),
            Arc::new(config),
            1,
            incarnation,
            None,
            core.clock.now(),
        );
        core.messaging
            .attach(name.clone(), incarnation, cell.mailbox.lock().clone());
        core.daemons.lock().insert(name.clone(), cell.clone());
        if let Err(err) = core.naming.confirm(&name, incarnation).await {
            cell.lost.store(true, AtomicOrdering::SeqCst);
            core.teardown(&cell, InstanceState::Stopped, None);
            return Err(err.into());
        }
        core.counters.spawned.fetch_add(1, AtomicOrdering::Relaxed);
        lifecycle("spawn", &name, &cell.definition);
        let handle = tokio::spawn(run_instance(core.clone(), cell.clone(), behavior, None, false));
        *cell.task.lock() = Some(handle.abort_handle());
        Ok(name)
    }

    /// Installs a reactive definition and its routes. Instances are created
    /// later, on events. Reinstalling an identical configuration is a no-op.
    pub fn install_reactive(&self, config: AtomConfiguration) -> Result<(), EngineError> {
        if config.kind != AtomKind::Reactive {
            return Err(EngineError::WrongKind(config.definition.clone()));
        }
        let behavior = self.check_placement(&config)?;
        let policy = config
            .scheduling
            .clone()
            .ok_or_else(|| EngineError::WrongKind(config.definition.clone()))?;
        let strategy = self.core.strategies.create(&policy)?;
        let mut pools = self.core.pools.write();
        if let Some(existing) = pools.get(&config.definition) {
            return if *existing.config == config {
                Ok(())
            } else {
                Err(EngineError::AlreadyInstalled(config.definition.clone()))
            };
        }
        let mut routes = self.core.routes.write();
        for route in &config.routes {
            if let Some(clash) = routes.iter().find(|r| {
                r.route.method == route.method && r.route.path_prefix == route.path_prefix
            }) {
                return Err(EngineError::RouteConflict {
                    method: route.method.clone(),
                    prefix: route.path_prefix.clone(),
                    existing: clash.definition.clone(),
                });
            }
        }
        for route in &config.routes {
            routes.push(InstalledRoute {
                route: route.clone(),
                definition: config.definition.clone(),
            });
        }
        pools.insert(
            config.definition.clone(),
            Arc::new(ReactivePool {
                config: Arc::new(config),
                behavior,
                state: Mutex::new(PoolState {
                    strategy,
                    live: Vec::new(),
                    created: 0,
                }),
            }),
        );
        Ok(())
    }

    /// Definition owning the longest route prefix matching the request.
    pub fn match_route(&self, method: &str, path: &str) -> Option<String> {
        self.core
            .routes
            .read()
            .iter()
            .filter(|r| r.route.matches(method, path))
            .max_by_key(|r| r.route.path_prefix.len())
            .map(|r| r.definition.clone())
    }

    /// Hands an event to an instance of `definition` chosen by its
    /// scheduling strategy.
    pub fn dispatch_event(&self, definition: &str, mut event: Event) -> Result<DispatchTicket, EngineError> {
        let core = &self.core;
        if core.is_halted() {
            return Err(EngineError::Stopped);
        }
        let pool = core
            .pools
            .read()
            .get(definition)
            .cloned()
            .ok_or_else(|| EngineError::NotReactive(definition.to_string()))?;
        event.id = core.next_event.fetch_add(1, AtomicOrdering::Relaxed);
        let (tx, rx) = oneshot::channel();
        let mut sender = Some(tx);
        let now = core.clock.now();
        let mut state = pool.state.lock();
        core.sweep(&mut state, now);
        loop {
            let slots: Vec<PoolSlot> = state.live.iter().map(|c| c.slot()).collect();
            match state.strategy.place(&slots, now) {
                Placement::Reuse(index) => {
                    let cell = state.live[index].clone();
                    {
                        let mut activity = cell.activity.lock();
                        activity.pending.insert(event.id, sender.take().expect("sender"));
                        activity.slot.outstanding += 1;
                        activity.slot.last_activity = now;
                    }
                    let mailbox = cell.mailbox.lock().clone();
                    match mailbox.push(Inbound::Event(event.clone()), Ordering::Fifo) {
                        Ok(()) => {
                            return Ok(DispatchTicket {
                                instance: cell.name.clone(),
                                ordinal: cell.ordinal,
                                event: event.id,
                                response: rx,
                            })
                        }
                        Err(err) => {
                            {
                                let mut activity = cell.activity.lock();
                                sender = activity.pending.remove(&event.id);
                                activity.slot.outstanding =
                                    activity.slot.outstanding.saturating_sub(1);
                            }
                            if err == crate::messaging::PushError::Full {
                                return Err(EngineError::Overloaded(cell.name.clone()));
                            }
                            state.live.remove(index);
                        }
                    }
                }
                Placement::Spawn => {
                    state.created += 1;
                    let ordinal = state.created;
                    let suffix = core.next_suffix.fetch_add(1, AtomicOrdering::Relaxed);
                    let name = AtomName::new(&format!("{definition}/{}.{suffix}", core.node))?;
                    let incarnation = core.naming.claim(&name)?;
                    let cell = core.new_cell(
                        name.clone(),
                        pool.config.clone(),
                        ordinal,
                        incarnation,
                        Some(Arc::downgrade(&pool)),
                        now,
                    );
                    {
                        let mut activity = cell.activity.lock();
                        activity.pending.insert(event.id, sender.take().expect("sender"));
                        activity.slot.outstanding = 1;
                    }
                    core.messaging
                        .attach(name.clone(), incarnation, cell.mailbox.lock().clone());
                    state.live.push(cell.clone());
                    drop(state);
                    core.counters.spawned.fetch_add(1, AtomicOrdering::Relaxed);
                    lifecycle("spawn", &name, definition);
                    let id = event.id;
                    let handle = tokio::spawn(run_instance(
                        core.clone(),
                        cell.clone(),
                        pool.behavior.clone(),
                        Some(event),
                        true,
                    ));
                    *cell.task.lock() = Some(handle.abort_handle());
                    return Ok(DispatchTicket {
                        instance: name,
                        ordinal,
                        event: id,
                        response: rx,
                    });
                }
            }
        }
    }

    /// Live instances of a reactive definition, in creation order.
    pub fn instances(&self, definition: &str) -> Vec<InstanceInfo> {
        self.core
            .pools
            .read()
            .get(definition)
            .map(|pool| pool.state.lock().live.iter().map(|c| c.info()).collect())
            .unwrap_or_default()
    }

    pub fn daemons(&self) -> Vec<InstanceInfo> {
        let mut out: Vec<_> = self.core.daemons.lock().values().map(|c| c.info()).collect();
        out.sort_by(|a, b| a.name.cmp(&b.name));
        out
    }

    pub fn instance(&self, name: &AtomName) -> Option<InstanceInfo> {
        self.core.find_cell(name).map(|c| c.info())
    }

    pub fn stats(&self) -> EngineStats {
        let c = &self.core.counters;
        EngineStats {
            spawned: c.spawned.load(AtomicOrdering::Relaxed),
            exited: c.exited.load(AtomicOrdering::Relaxed),
            expired: c.expired.load(AtomicOrdering::Relaxed),
            faulted: c.faulted.load(AtomicOrdering::Relaxed),
            restarted: c.restarted.load(AtomicOrdering::Relaxed),
            reentrancy_violations: c.reentrancy_violations.load(AtomicOrdering::Relaxed),
        }
    }

    /// Stops every instance. Pending events fail.
    pub fn shutdown(&self) {
        self.core.halt(HaltReason::Shutdown);
    }

    pub fn halt_reason(&self) -> Option<HaltReason> {
        self.core.halted.borrow().clone()
    }

    /// Resolves when the engine halts, with the reason.
    pub async fn halted(&self) -> HaltReason {
        let mut rx = self.core.halted.subscribe();
        loop {
            if let Some(reason) = rx.borrow_and_update().clone() {
                return reason;
            }
            if rx.changed().await.is_err() {
                return HaltReason::Shutdown;
            }
        }
    }
}
