use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use bytes::Bytes;
use parking_lot::Mutex;
use radon_core::builtins::Echo;
use radon_core::engine::{
    AtomContext, AtomDefinition, Behavior, Engine, EngineError, EngineOptions, GuestResult,
    HaltReason, InProcessEngine, InstanceState, ManualClock, ModuleEngine, RuntimeError,
};
use radon_core::messaging::{Mailbox, Messaging, RecvError};
use radon_core::model::{
    AtomConfiguration, AtomName, Envelope, Event, EventRoute, Inbound, NodeId, Ordering,
    RecoveryPolicy, SchedulingPolicy,
};
use radon_core::naming::{NameSpace, Naming};
use radon_core::storage::Storage;

fn n(s: &str) -> AtomName {
    AtomName::new(s).unwrap()
}

struct Harness {
    engine: Engine,
    naming: Arc<Naming>,
    messaging: Arc<Messaging>,
}

fn harness_with(defs: Vec<AtomDefinition>, tags: &[&str], options: EngineOptions) -> Harness {
    let naming = Arc::new(Naming::new(NodeId::new("n1").unwrap()));
    let messaging = Arc::new(Messaging::new(naming.clone()));
    let modules = Arc::new(InProcessEngine::new());
    for def in defs {
        modules.register(def).unwrap();
    }
    let engine = Engine::new(
        tags.iter().map(|t| t.to_string()).collect::<BTreeSet<_>>(),
        naming.clone(),
        messaging.clone(),
        Storage::in_memory(),
        modules,
        options,
    );
    Harness {
        engine,
        naming,
        messaging,
    }
}

fn harness(defs: Vec<AtomDefinition>) -> Harness {
    harness_with(defs, &[], EngineOptions::default())
}

impl Harness {
    /// A test-side mailbox registered under `name`.
    async fn probe(&self, name: &str) -> Arc<Mailbox> {
        let inc = self.naming.register(&n(name)).await.unwrap();
        let mailbox = Arc::new(Mailbox::new(1024));
        self.messaging.attach(n(name), inc, mailbox.clone());
        mailbox
    }

    fn send(&self, from: &str, to: &str, body: &'static str) {
        self.messaging
            .send(Envelope {
                sender: n(from),
                destination: n(to).into(),
                ordering: Ordering::Fifo,
                payload: Bytes::from_static(body.as_bytes()),
                correlation_id: None,
            })
            .unwrap();
    }

    async fn call(&self, definition: &str, body: &'static str) -> (u64, u16, Bytes) {
        let ticket = self
            .engine
            .dispatch_event(definition, Event::new("POST", "/", body))
            .unwrap();
        let response = ticket.response.await.unwrap();
        (ticket.ordinal, response.status, response.body)
    }
}

async fn recv_body(mailbox: &Mailbox) -> Bytes {
    match tokio::time::timeout(Duration::from_secs(5), mailbox.receive(None))
        .await
        .expect("reply in time")
        .unwrap()
    {
        Inbound::Message(e) => e.payload,
        Inbound::Event(e) => e.body,
    }
}

async fn eventually(mut check: impl FnMut() -> bool) -> bool {
    for _ in 0..500 {
        if check() {
            return true;
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    false
}

/// Replies to every message with its payload; traps on "trap", exits on
/// "exit".
struct Pong;

#[async_trait]
impl Behavior for Pong {
    async fn main(&self, ctx: &mut AtomContext, _initial: Option<Event>) -> GuestResult {
        loop {
            let Ok(Inbound::Message(msg)) = ctx.receive(None).await else {
                return Ok(());
            };
            match &msg.payload[..] {
                b"trap" => panic!("trap requested"),
                b"exit" => {
                    ctx.exit();
                    return Ok(());
                }
                _ => {
                    ctx.send(msg.sender, Ordering::Fifo, msg.payload)?;
                }
            }
        }
    }
}

/// Counts activations in storage and traps on the first message.
struct Fragile;

#[async_trait]
impl Behavior for Fragile {
    async fn main(&self, ctx: &mut AtomContext, _initial: Option<Event>) -> GuestResult {
        let key = format!("{}/runs", ctx.self_name());
        let runs = ctx
            .storage_get(key.as_bytes())?
            .map_or(0, |v| v[0]);
        ctx.storage_set(key.as_bytes(), &[runs + 1])?;
        loop {
            let Ok(Inbound::Message(msg)) = ctx.receive(None).await else {
                return Ok(());
            };
            if &msg.payload[..] == b"trap" {
                return Err(radon_core::engine::Fault::new("trap"));
            }
            ctx.send(msg.sender, Ordering::Fifo, format!("run{}", runs + 1))?;
        }
    }

    fn has_recover_hook(&self) -> bool {
        true
    }

    async fn recover(&self, ctx: &mut AtomContext) -> GuestResult {
        ctx.storage_set(b"recovered", b"1")?;
        Ok(())
    }
}

#[tokio::test]
async fn definitions_and_daemon_spawning() {
    let h = harness_with(
        vec![AtomDefinition::new("pong", Pong)],
        &["edge"],
        EngineOptions::default(),
    );
    assert_eq!(
        h.engine.register_definition(AtomDefinition::new("pong", Pong)),
        Err(EngineError::DuplicateDefinition("pong".into()))
    );
    assert!(matches!(
        h.engine.spawn_daemon(AtomConfiguration::daemon("ghost", "g")).await,
        Err(EngineError::UnknownDefinition(_))
    ));
    let name = h
        .engine
        .spawn_daemon(AtomConfiguration::daemon("pong", "coord"))
        .await
        .unwrap();
    assert_eq!(name, n("coord"));
    assert!(matches!(
        h.engine.spawn_daemon(AtomConfiguration::daemon("pong", "coord")).await,
        Err(EngineError::NameConflict { .. })
    ));
    let mut ssd_only = AtomConfiguration::daemon("pong", "other");
    ssd_only.hosts.allow_tags.insert("ssd".into());
    assert!(matches!(
        h.engine.spawn_daemon(ssd_only).await,
        Err(EngineError::HostMismatch { .. })
    ));
    let templated = h
        .engine
        .spawn_daemon(AtomConfiguration::daemon("pong", "kv/{node}"))
        .await
        .unwrap();
    assert_eq!(templated, n("kv/n1"));

    let probe = h.probe("probe").await;
    h.send("probe", "coord", "hello");
    assert_eq!(recv_body(&probe).await, "hello");
}

#[tokio::test]
async fn exit_deregisters_and_stops() {
    let h = harness(vec![AtomDefinition::new("pong", Pong)]);
    h.engine
        .spawn_daemon(AtomConfiguration::daemon("pong", "p"))
        .await
        .unwrap();
    h.send("x", "p", "exit");
    assert!(eventually(|| h.naming.lookup("p").is_none()).await);
    assert!(h.engine.instance(&n("p")).is_none());
    assert_eq!(h.engine.stats().exited, 1);
}

struct Introspect {
    seen: Arc<Mutex<Vec<String>>>,
}

#[async_trait]
impl Behavior for Introspect {
    async fn main(&self, ctx: &mut AtomContext, _initial: Option<Event>) -> GuestResult {
        let mut seen = Vec::new();
        seen.push(format!("{:?}", ctx.receive(Some(Duration::ZERO)).await.err()));
        let a = ctx.random_bytes(16)?;
        let b = ctx.random_bytes(16)?;
        seen.push(format!("{} {}", a.len(), a != b));
        seen.push(format!("{}", ctx.now() > std::time::UNIX_EPOCH));
        seen.push(ctx.argument("mode").unwrap_or("none").to_string());
        seen.push(format!("{:?}", ctx.resolve("intro.*", NameSpace::Names)?));
        ctx.exit();
        seen.push(format!("{}", matches!(ctx.storage_get(b"k"), Err(RuntimeError::Stopped))));
        seen.push(format!("{:?}", ctx.receive(None).await.err()));
        *self.seen.lock() = seen;
        Ok(())
    }
}

#[tokio::test]
async fn runtime_interface_basics() {
    let seen = Arc::new(Mutex::new(Vec::new()));
    let h = harness(vec![AtomDefinition::new(
        "intro",
        Introspect { seen: seen.clone() },
    )]);
    h.engine
        .spawn_daemon(AtomConfiguration::daemon("intro", "intro").with_arg("mode", "fast"))
        .await
        .unwrap();
    assert!(eventually(|| !seen.lock().is_empty()).await);
    assert_eq!(
        *seen.lock(),
        vec![
            format!("{:?}", Some(RecvError::Timeout)),
            "16 true".to_string(),
            "true".to_string(),
            "fast".to_string(),
            r#"["intro"]"#.to_string(),
            "true".to_string(),
            format!("{:?}", Some(RecvError::Closed)),
        ]
    );
}

fn reactive(def: &str, policy: SchedulingPolicy) -> AtomConfiguration {
    AtomConfiguration::reactive(def, policy, vec![EventRoute::new("POST", "/")])
}

#[tokio::test]
async fn on_demand_spawns_per_event() {
    let h = harness(vec![AtomDefinition::new("echo", Echo)]);
    h.engine
        .install_reactive(reactive("echo", SchedulingPolicy::OnDemand))
        .unwrap();
    let mut names = BTreeSet::new();
    for _ in 0..3 {
        let ticket = h
            .engine
            .dispatch_event("echo", Event::new("POST", "/", "x"))
            .unwrap();
        names.insert(ticket.instance.clone());
        assert_eq!(ticket.response.await.unwrap().body, "x");
    }
    assert_eq!(names.len(), 3);
    assert!(eventually(|| h.engine.instances("echo").is_empty()).await);
    assert!(eventually(|| h.naming.resolve("echo/.*", NameSpace::Names).unwrap().is_empty()).await);
}

#[tokio::test]
async fn round_robin_assignment_and_fairness() {
    let h = harness(vec![AtomDefinition::new("echo", Echo)]);
    h.engine
        .install_reactive(reactive("echo", SchedulingPolicy::RoundRobin { limit: 2 }))
        .unwrap();
    let mut picks = Vec::new();
    for _ in 0..4 {
        picks.push(h.call("echo", "x").await.0);
    }
    assert_eq!(picks, vec![1, 2, 1, 2]);

    let k = 4;
    let per = 25;
    let h = harness(vec![AtomDefinition::new("echo", Echo)]);
    h.engine
        .install_reactive(reactive("echo", SchedulingPolicy::RoundRobin { limit: k }))
        .unwrap();
    for _ in 0..(k as usize * per) {
        h.call("echo", "x").await;
    }
    let handled: Vec<u64> = h
        .engine
        .instances("echo")
        .iter()
        .map(|i| i.events_handled)
        .collect();
    assert_eq!(handled, vec![per as u64; k as usize]);
}

#[tokio::test]
async fn on_demand_expire_timeline() {
    let clock = ManualClock::new();
    let options = EngineOptions {
        clock: Arc::new(clock.clone()),
        reaper_interval: None,
        ..EngineOptions::default()
    };
    let h = harness_with(vec![AtomDefinition::new("echo", Echo)], &[], options);
    h.engine
        .install_reactive(reactive(
            "echo",
            SchedulingPolicy::OnDemandExpire {
                idle_timeout: Some(Duration::from_secs(5)),
                max_events: None,
            },
        ))
        .unwrap();
    let mut picks = Vec::new();
    for t in [0, 1, 7] {
        clock.set(Duration::from_secs(t));
        picks.push(h.call("echo", "x").await.0);
    }
    assert_eq!(picks, vec![1, 1, 2]);
    assert_eq!(h.engine.stats().expired, 1);
}

/// Holds every event until told to release it, to exercise concurrency.
struct Slow;

#[async_trait]
impl Behavior for Slow {
    async fn main(&self, ctx: &mut AtomContext, initial: Option<Event>) -> GuestResult {
        let mut next = initial;
        loop {
            if let Some(event) = next.take() {
                tokio::time::sleep(Duration::from_millis(1)).await;
                ctx.respond(event.id, 200, event.body)?;
            }
            match ctx.receive(None).await {
                Ok(Inbound::Event(event)) => next = Some(event),
                Ok(_) => {}
                Err(_) => return Ok(()),
            }
        }
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn event_storm_respects_cardinality_and_single_threading() {
    for (policy, bound) in [
        (SchedulingPolicy::One, 1),
        (SchedulingPolicy::RoundRobin { limit: 3 }, 3),
    ] {
        let h = harness(vec![AtomDefinition::new("slow", Slow)]);
        h.engine.install_reactive(reactive("slow", policy)).unwrap();
        let mut waits = Vec::new();
        for _ in 0..200 {
            let ticket = h
                .engine
                .dispatch_event("slow", Event::new("POST", "/", "x"))
                .unwrap();
            assert!(h.engine.instances("slow").len() <= bound);
            waits.push(ticket.response);
        }
        for wait in waits {
            assert_eq!(wait.await.unwrap().status, 200);
        }
        assert_eq!(h.engine.stats().spawned, bound as u64);
        assert_eq!(h.engine.stats().reentrancy_violations, 0);
    }
}

#[tokio::test]
async fn send_does_not_wait_for_busy_receiver() {
    struct Busy;
    #[async_trait]
    impl Behavior for Busy {
        async fn main(&self, ctx: &mut AtomContext, _initial: Option<Event>) -> GuestResult {
            let _ = ctx.receive(None).await;
            tokio::time::sleep(Duration::from_millis(500)).await;
            Ok(())
        }
    }
    let h = harness(vec![AtomDefinition::new("busy", Busy)]);
    h.engine
        .spawn_daemon(AtomConfiguration::daemon("busy", "b"))
        .await
        .unwrap();
    h.send("x", "b", "first");
    tokio::time::sleep(Duration::from_millis(20)).await;
    assert_eq!(h.engine.instance(&n("b")).unwrap().state, InstanceState::Busy);
    let started = std::time::Instant::now();
    h.send("x", "b", "second");
    assert!(started.elapsed() < Duration::from_millis(100));
}

#[tokio::test]
async fn recovery_none_keeps_siblings_running() {
    let h = harness(vec![AtomDefinition::new("pong", Pong)]);
    for name in ["a", "b"] {
        h.engine
            .spawn_daemon(AtomConfiguration::daemon("pong", name))
            .await
            .unwrap();
    }
    let probe = h.probe("probe").await;
    h.send("probe", "a", "trap");
    assert!(eventually(|| h.naming.lookup("a").is_none()).await);
    h.send("probe", "b", "alive");
    assert_eq!(recv_body(&probe).await, "alive");
    assert_eq!(h.engine.stats().faulted, 1);
}

#[tokio::test]
async fn recovery_restart_keeps_name_and_bumps_incarnation() {
    let h = harness(vec![AtomDefinition::new("fragile", Fragile)]);
    h.engine
        .spawn_daemon(AtomConfiguration::daemon("fragile", "kv/0").with_recovery(RecoveryPolicy::Restart))
        .await
        .unwrap();
    let probe = h.probe("probe").await;
    h.send("probe", "kv/0", "hi");
    assert_eq!(recv_body(&probe).await, "run1");
    h.send("probe", "kv/0", "trap");
    assert!(eventually(|| h.naming.lookup("kv/0").is_some_and(|r| r.incarnation == 2)).await);
    assert_eq!(h.naming.resolve("kv/0", NameSpace::Names).unwrap(), vec![n("kv/0")]);
    h.send("probe", "kv/0", "hi");
    assert_eq!(recv_body(&probe).await, "run2");
    assert_eq!(h.engine.storage().get(b"recovered"), None);
}

#[tokio::test]
async fn recovery_recover_runs_hook_before_restart() {
    let h = harness(vec![AtomDefinition::new("fragile", Fragile)]);
    h.engine
        .spawn_daemon(AtomConfiguration::daemon("fragile", "f").with_recovery(RecoveryPolicy::Recover))
        .await
        .unwrap();
    let probe = h.probe("probe").await;
    h.send("probe", "f", "trap");
    assert!(eventually(|| h.naming.lookup("f").is_some_and(|r| r.incarnation == 2)).await);
    assert_eq!(h.engine.storage().get(b"recovered").unwrap(), "1");
    h.send("probe", "f", "hi");
    assert_eq!(recv_body(&probe).await, "run2");
}

#[tokio::test]
async fn recovery_escalate_stops_everything() {
    let h = harness(vec![AtomDefinition::new("pong", Pong)]);
    h.engine
        .spawn_daemon(AtomConfiguration::daemon("pong", "bystander"))
        .await
        .unwrap();
    h.engine
        .spawn_daemon(AtomConfiguration::daemon("pong", "e").with_recovery(RecoveryPolicy::Escalate))
        .await
        .unwrap();
    h.send("x", "e", "trap");
    let reason = tokio::time::timeout(Duration::from_secs(5), h.engine.halted())
        .await
        .unwrap();
    assert_eq!(reason, HaltReason::Escalated(n("e")));
    assert!(h.engine.daemons().is_empty());
    assert!(h.naming.lookup("bystander").is_none());
    assert!(matches!(
        h.engine.spawn_daemon(AtomConfiguration::daemon("pong", "late")).await,
        Err(EngineError::Stopped)
    ));
}

#[tokio::test]
async fn reactive_fault_fails_pending_event() {
    let h = harness(radon_core::builtins::definitions());
    h.engine
        .install_reactive(reactive("faulty", SchedulingPolicy::OnDemand))
        .unwrap();
    let ticket = h
        .engine
        .dispatch_event("faulty", Event::new("POST", "/", "x"))
        .unwrap();
    assert!(ticket.response.await.is_err());
    assert!(eventually(|| h.engine.instances("faulty").is_empty()).await);
}

#[tokio::test]
async fn route_installation_rules() {
    let h = harness(radon_core::builtins::definitions());
    h.engine
        .install_reactive(AtomConfiguration::reactive(
            "echo",
            SchedulingPolicy::One,
            vec![EventRoute::new("GET", "/kv"), EventRoute::new("GET", "/kv/special")],
        ))
        .unwrap();
    assert_eq!(h.engine.match_route("GET", "/kv/abc").as_deref(), Some("echo"));
    assert_eq!(h.engine.match_route("GET", "/nope"), None);
    assert!(matches!(
        h.engine.install_reactive(AtomConfiguration::reactive(
            "faulty",
            SchedulingPolicy::One,
            vec![EventRoute::new("GET", "/kv")],
        )),
        Err(EngineError::RouteConflict { .. })
    ));
    h.engine
        .install_reactive(AtomConfiguration::reactive(
            "faulty",
            SchedulingPolicy::One,
            vec![EventRoute::new("GET", "/kv/deeper")],
        ))
        .unwrap();
    assert_eq!(h.engine.match_route("GET", "/kv/deeper/x").as_deref(), Some("faulty"));
    assert_eq!(h.engine.match_route("GET", "/kv/deep").as_deref(), Some("echo"));
}
