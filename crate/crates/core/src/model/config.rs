use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{AtomKind, AtomName, EventRoute, NameError, RecoveryPolicy, SchedulingPolicy};

const NODE_PLACEHOLDER: &str = "{node}";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("atom #{index}: {message}")]
    Semantic { index: usize, message: String },
}

/// Daemon name as written in a configuration document. May contain the
/// `{node}` placeholder, substituted with the hosting node id at placement.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct DaemonName(String);

impl DaemonName {
    pub fn new(template: &str) -> Result<Self, NameError> {
        AtomName::new(&template.replace(NODE_PLACEHOLDER, "n"))?;
        Ok(Self(template.to_string()))
    }

    pub fn is_template(&self) -> bool {
        self.0.contains(NODE_PLACEHOLDER)
    }

    pub fn resolve(&self, node_id: &str) -> Result<AtomName, NameError> {
        AtomName::new(&self.0.replace(NODE_PLACEHOLDER, node_id))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl From<AtomName> for DaemonName {
    fn from(name: AtomName) -> Self {
        Self(name.as_str().to_string())
    }
}

/// Where an atom may be placed: an optional explicit host list, narrowed by
/// tag whitelist and blacklist.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct HostConstraint {
    pub hosts: Option<Vec<String>>,
    pub allow_tags: BTreeSet<String>,
    pub deny_tags: BTreeSet<String>,
}

impl HostConstraint {
    pub fn admits(&self, node_id: &str, tags: &BTreeSet<String>) -> bool {
        if let Some(hosts) = &self.hosts {
            if !hosts.iter().any(|h| h == node_id) {
                return false;
            }
        }
        self.allow_tags.is_subset(tags) && self.deny_tags.is_disjoint(tags)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AtomConfiguration {
    pub definition: String,
    pub kind: AtomKind,
    /// Daemon atoms only.
    pub name: Option<DaemonName>,
    /// Reactive atoms only.
    pub scheduling: Option<SchedulingPolicy>,
    pub recovery: RecoveryPolicy,
    pub hosts: HostConstraint,
    /// Reactive atoms only.
    pub routes: Vec<EventRoute>,
    /// Definition-specific parameters, readable by the guest.
    pub args: BTreeMap<String, String>,
}

impl AtomConfiguration {
    pub fn daemon(definition: &str, name: &str) -> Self {
        Self {
            definition: definition.to_string(),
            kind: AtomKind::Daemon,
            name: Some(DaemonName::new(name).expect("valid daemon name")),
            scheduling: None,
            recovery: RecoveryPolicy::None,
            hosts: HostConstraint::default(),
            routes: Vec::new(),
            args: BTreeMap::new(),
        }
    }

    pub fn reactive(definition: &str, policy: SchedulingPolicy, routes: Vec<EventRoute>) -> Self {
        Self {
            definition: definition.to_string(),
            kind: AtomKind::Reactive,
            name: None,
            scheduling: Some(policy),
            recovery: RecoveryPolicy::None,
            hosts: HostConstraint::default(),
            routes,
            args: BTreeMap::new(),
        }
    }

    pub fn with_recovery(mut self, recovery: RecoveryPolicy) -> Self {
        self.recovery = recovery;
        self
    }

    pub fn with_hosts(mut self, hosts: &[&str]) -> Self {
        self.hosts.hosts = Some(hosts.iter().map(|h| h.to_string()).collect());
        self
    }

    pub fn with_arg(mut self, key: &str, value: impl ToString) -> Self {
        self.args.insert(key.to_string(), value.to_string());
        self
    }

    /// Checks every structural invariant of a single configuration.
    pub fn validate(&self) -> Result<(), String> {
        if self.definition.is_empty() {
            return Err("definition must not be empty".into());
        }
        match self.kind {
            AtomKind::Daemon => {
                if self.name.is_none() {
                    return Err("daemon atoms need a name".into());
                }
                if self.scheduling.is_some() {
                    return Err("daemon atoms take no scheduling policy".into());
                }
                if !self.routes.is_empty() {
                    return Err("daemon atoms take no event routes".into());
                }
            }
            AtomKind::Reactive => {
                if self.name.is_some() {
                    return Err("reactive atoms get generated names, drop `name`".into());
                }
                match &self.scheduling {
                    None => return Err("reactive atoms need a scheduling policy".into()),
                    Some(policy) => policy.check()?,
                }
                if self.routes.is_empty() {
                    return Err("reactive atoms need at least one route".into());
                }
                for route in &self.routes {
                    if route.method.is_empty() {
                        return Err("route method must not be empty".into());
                    }
                    if !route.path_prefix.starts_with('/') {
                        return Err(format!(
                            "route prefix {:?} must start with '/'",
                            route.path_prefix
                        ));
                    }
                }
            }
        }
        if let Some(tag) = self.hosts.allow_tags.intersection(&self.hosts.deny_tags).next() {
            return Err(format!("tag {tag:?} is both allowed and denied"));
        }
        Ok(())
    }
}

/// Parses `"<int>s"` or `"<int>ms"`.
pub fn parse_duration(text: &str) -> Result<Duration, String> {
    let (digits, unit_ms) = if let Some(ms) = text.strip_suffix("ms") {
        (ms, 1)
    } else if let Some(s) = text.strip_suffix('s') {
        (s, 1000)
    } else {
        return Err(format!("duration {text:?} needs an `s` or `ms` suffix"));
    };
    let value: u64 = digits
        .parse()
        .map_err(|_| format!("duration {text:?} is not an integer count"))?;
    Ok(Duration::from_millis(value * unit_ms))
}

fn render_duration(duration: Duration) -> String {
    let ms = duration.as_millis();
    if ms % 1000 == 0 {
        format!("{}s", ms / 1000)
    } else {
        format!("{ms}ms")
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Document {
    atoms: Vec<RawAtom>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAtom {
    definition: String,
    kind: AtomKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scheduling: Option<RawScheduling>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    recovery: Option<RecoveryPolicy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    hosts: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    allow_tags: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    deny_tags: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    routes: Vec<EventRoute>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    args: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum RawScheduling {
    Bare(String),
    Full(RawPolicy),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPolicy {
    policy: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    limit: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    idle_timeout: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    max_events: Option<u64>,
}

impl RawScheduling {
    fn into_policy(self) -> Result<SchedulingPolicy, String> {
        let raw = match self {
            RawScheduling::Bare(policy) => RawPolicy {
                policy,
                limit: None,
                idle_timeout: None,
                max_events: None,
            },
            RawScheduling::Full(raw) => raw,
        };
        let policy = match raw.policy.as_str() {
            "one" => SchedulingPolicy::One,
            "round-robin" => SchedulingPolicy::RoundRobin {
                limit: raw.limit.ok_or("round-robin needs `limit`")?,
            },
            "on-demand" => SchedulingPolicy::OnDemand,
            "on-demand-expire" => SchedulingPolicy::OnDemandExpire {
                idle_timeout: raw.idle_timeout.as_deref().map(parse_duration).transpose()?,
                max_events: raw.max_events,
            },
            other => return Err(format!("unknown scheduling policy {other:?}")),
        };
        let takes_limit = matches!(policy, SchedulingPolicy::RoundRobin { .. });
        let takes_expiry = matches!(policy, SchedulingPolicy::OnDemandExpire { .. });
        if (raw.limit.is_some() && !takes_limit)
            || ((raw.idle_timeout.is_some() || raw.max_events.is_some()) && !takes_expiry)
        {
            return Err(format!("stray parameters for policy {:?}", raw.policy));
        }
        Ok(policy)
    }

    fn from_policy(policy: &SchedulingPolicy) -> Self {
        let mut raw = RawPolicy {
            policy: policy.strategy_name().to_string(),
            limit: None,
            idle_timeout: None,
            max_events: None,
        };
        match policy {
            SchedulingPolicy::RoundRobin { limit } => raw.limit = Some(*limit),
            SchedulingPolicy::OnDemandExpire {
                idle_timeout,
                max_events,
            } => {
                raw.idle_timeout = idle_timeout.map(render_duration);
                raw.max_events = *max_events;
            }
            _ => {}
        }
        RawScheduling::Full(raw)
    }
}

fn convert(raw: RawAtom) -> Result<AtomConfiguration, String> {
    let name = raw
        .name
        .as_deref()
        .map(DaemonName::new)
        .transpose()
        .map_err(|e| format!("bad name: {e}"))?;
    let config = AtomConfiguration {
        definition: raw.definition,
        kind: raw.kind,
        name,
        scheduling: raw.scheduling.map(RawScheduling::into_policy).transpose()?,
        recovery: raw.recovery.unwrap_or_default(),
        hosts: HostConstraint {
            hosts: raw.hosts,
            allow_tags: raw.allow_tags.into_iter().collect(),
            deny_tags: raw.deny_tags.into_iter().collect(),
        },
        routes: raw
            .routes
            .into_iter()
            .map(|r| EventRoute::new(&r.method, &r.path_prefix))
            .collect(),
        args: raw.args,
    };
    config.validate()?;
    Ok(config)
}

/// Parses a configuration document (`{"atoms": [...]}`), returning the
/// configurations in document order.
pub fn parse_configuration(text: &str) -> Result<Vec<AtomConfiguration>, ConfigError> {
    let doc: Document = serde_json::from_str(text).map_err(|e| ConfigError::Syntax {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let mut configs = Vec::with_capacity(doc.atoms.len());
    let mut daemon_names = BTreeSet::new();
    for (index, raw) in doc.atoms.into_iter().enumerate() {
        let config = convert(raw).map_err(|message| ConfigError::Semantic { index, message })?;
        if let Some(name) = &config.name {
            if !daemon_names.insert(name.clone()) {
                return Err(ConfigError::Semantic {
                    index,
                    message: format!("duplicate daemon name {:?}", name.as_str()),
                });
            }
        }
        configs.push(config);
    }
    Ok(configs)
}

/// Serializes configurations back into the canonical JSON document.
pub fn render_configuration(configs: &[AtomConfiguration]) -> String {
    let atoms = configs
        .iter()
        .map(|c| RawAtom {
            definition: c.definition.clone(),
            kind: c.kind,
            name: c.name.as_ref().map(|n| n.as_str().to_string()),
            scheduling: c.scheduling.as_ref().map(RawScheduling::from_policy),
            recovery: Some(c.recovery),
            hosts: c.hosts.hosts.clone(),
            allow_tags: c.hosts.allow_tags.iter().cloned().collect(),
            deny_tags: c.hosts.deny_tags.iter().cloned().collect(),
            routes: c.routes.clone(),
            args: c.args.clone(),
        })
        .collect();
    serde_json::to_string_pretty(&Document { atoms }).expect("configuration serializes")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn daemon_with_restart() {
        let configs = parse_configuration(
            r#"{"atoms":[{"definition":"kvnode","kind":"daemon","name":"kv/0",
                "recovery":"restart","hosts":["n1"]}]}"#,
        )
        .unwrap();
        assert_eq!(configs.len(), 1);
        let c = &configs[0];
        assert_eq!(c.definition, "kvnode");
        assert_eq!(c.kind, AtomKind::Daemon);
        assert_eq!(c.name.as_ref().unwrap().as_str(), "kv/0");
        assert_eq!(c.recovery, RecoveryPolicy::Restart);
        assert_eq!(c.hosts.hosts, Some(vec!["n1".to_string()]));
    }

    #[test]
    fn reactive_without_routes_is_rejected() {
        let err = parse_configuration(
            r#"{"atoms":[{"definition":"echo","kind":"reactive","scheduling":"on-demand"}]}"#,
        )
        .unwrap_err();
        assert!(matches!(err, ConfigError::Semantic { index: 0, .. }), "{err}");
    }

    #[test]
    fn recovery_defaults_to_none() {
        let configs = parse_configuration(
            r#"{"atoms":[{"definition":"coordinator","kind":"daemon","name":"coordinator"}]}"#,
        )
        .unwrap();
        assert_eq!(configs[0].recovery, RecoveryPolicy::None);
    }

    #[test]
    fn syntax_errors_report_position() {
        let err = parse_configuration("{\n  \"atoms\": [,]\n}").unwrap_err();
        match err {
            ConfigError::Syntax { line, column, .. } => {
                assert_eq!(line, 2);
                assert!(column > 0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn semantic_errors() {
        let cases = [
            r#"{"atoms":[{"definition":"d","kind":"daemon","name":"a","scheduling":"one"}]}"#,
            r#"{"atoms":[{"definition":"d","kind":"daemon"}]}"#,
            r#"{"atoms":[{"definition":"d","kind":"daemon","name":"a"},
                         {"definition":"e","kind":"daemon","name":"a"}]}"#,
            r#"{"atoms":[{"definition":"d","kind":"daemon","name":"a",
                "allow_tags":["x"],"deny_tags":["x"]}]}"#,
            r#"{"atoms":[{"definition":"d","kind":"reactive",
                "scheduling":{"policy":"round-robin","limit":0},
                "routes":[{"method":"GET","path_prefix":"/"}]}]}"#,
            r#"{"atoms":[{"definition":"d","kind":"reactive",
                "scheduling":{"policy":"on-demand-expire"},
                "routes":[{"method":"GET","path_prefix":"/"}]}]}"#,
            r#"{"atoms":[{"definition":"d","kind":"reactive","scheduling":"one",
                "routes":[{"method":"GET","path_prefix":"nope"}]}]}"#,
            r#"{"atoms":[{"definition":"d","kind":"daemon","name":"bad name"}]}"#,
        ];
        for case in cases {
            assert!(
                matches!(parse_configuration(case), Err(ConfigError::Semantic { .. })),
                "{case}"
            );
        }
    }

    #[test]
    fn durations() {
        assert_eq!(parse_duration("5s"), Ok(Duration::from_secs(5)));
        assert_eq!(parse_duration("10ms"), Ok(Duration::from_millis(10)));
        assert!(parse_duration("5").is_err());
        assert!(parse_duration("1.5s").is_err());
        assert_eq!(render_duration(Duration::from_millis(1500)), "1500ms");
    }

    #[test]
    fn templates() {
        let name = DaemonName::new("kv/{node}/3").unwrap();
        assert!(name.is_template());
        assert_eq!(name.resolve("n2").unwrap().as_str(), "kv/n2/3");
        assert!(DaemonName::new("kv/{other}").is_err());
    }

    fn arb_tag() -> impl Strategy<Value = String> {
        "[a-z]{1,4}"
    }

    fn arb_policy() -> impl Strategy<Value = SchedulingPolicy> {
        prop_oneof![
            Just(SchedulingPolicy::One),
            (1u32..16).prop_map(|limit| SchedulingPolicy::RoundRobin { limit }),
            Just(SchedulingPolicy::OnDemand),
            (
                proptest::option::of(0u64..20_000),
                proptest::option::of(1u64..100)
            )
                .prop_filter("one criterion", |(t, m)| t.is_some() || m.is_some())
                .prop_map(|(t, m)| SchedulingPolicy::OnDemandExpire {
                    idle_timeout: t.map(Duration::from_millis),
                    max_events: m,
                }),
        ]
    }

    fn arb_hosts() -> impl Strategy<Value = HostConstraint> {
        (
            proptest::option::of(proptest::collection::vec("n[0-9]", 0..3)),
            proptest::collection::btree_set(arb_tag(), 0..3),
            proptest::collection::btree_set(arb_tag(), 0..3),
        )
            .prop_map(|(hosts, allow, deny)| HostConstraint {
                hosts,
                deny_tags: deny.difference(&allow).cloned().collect(),
                allow_tags: allow,
            })
    }

    fn arb_recovery() -> impl Strategy<Value = RecoveryPolicy> {
        prop_oneof![
            Just(RecoveryPolicy::None),
            Just(RecoveryPolicy::Escalate),
            Just(RecoveryPolicy::Restart),
            Just(RecoveryPolicy::Recover),
        ]
    }

    fn arb_args() -> impl Strategy<Value = BTreeMap<String, String>> {
        proptest::collection::btree_map("[a-z]{1,5}", "[a-z0-9]{0,5}", 0..3)
    }

    fn arb_config() -> impl Strategy<Value = AtomConfiguration> {
        let daemon = (
            "[a-z]{1,6}",
            "[a-z]{1,4}(/\\{node\\})?(/[0-9])?",
            arb_recovery(),
            arb_hosts(),
            arb_args(),
        )
            .prop_map(|(def, name, recovery, hosts, args)| AtomConfiguration {
                name: Some(DaemonName::new(&name).unwrap()),
                recovery,
                hosts,
                args,
                ..AtomConfiguration::daemon(&def, "x")
            });
        let route = ("GET|PUT|POST", "/[a-z]{0,4}")
            .prop_map(|(m, p)| EventRoute::new(&m, &p));
        let reactive = (
            "[a-z]{1,6}",
            arb_policy(),
            proptest::collection::vec(route, 1..3),
            arb_recovery(),
            arb_hosts(),
            arb_args(),
        )
            .prop_map(|(def, policy, routes, recovery, hosts, args)| AtomConfiguration {
                recovery,
                hosts,
                args,
                ..AtomConfiguration::reactive(&def, policy, routes)
            });
        prop_oneof![daemon, reactive]
    }

    fn dedup_daemons(configs: Vec<AtomConfiguration>) -> Vec<AtomConfiguration> {
        let mut seen = BTreeSet::new();
        configs
            .into_iter()
            .filter(|c| c.name.as_ref().is_none_or(|n| seen.insert(n.clone())))
            .collect()
    }

    /// Loosely shaped atoms: any mix of fields, valid or not.
    fn arb_raw_atom() -> impl Strategy<Value = serde_json::Value> {
        let scheduling = prop_oneof![
            Just(serde_json::json!("one")),
            Just(serde_json::json!("on-demand")),
            Just(serde_json::json!("bogus")),
            (0u32..3).prop_map(|l| serde_json::json!({"policy": "round-robin", "limit": l})),
            (proptest::option::of("[0-9]{1,2}(s|ms)?"), proptest::option::of(0u64..3)).prop_map(
                |(t, m)| serde_json::json!({"policy": "on-demand-expire", "idle_timeout": t, "max_events": m})
            ),
        ];
        (
            prop_oneof![Just("daemon"), Just("reactive")],
            proptest::option::of("[a-z{}/ ]{0,6}"),
            proptest::option::of(scheduling),
            proptest::collection::vec(("GET|PUT", "/?[a-z]{0,3}"), 0..2),
            proptest::collection::vec("[ab]", 0..2),
            proptest::collection::vec("[ab]", 0..2),
        )
            .prop_map(|(kind, name, scheduling, routes, allow, deny)| {
                let mut atom = serde_json::json!({"definition": "d", "kind": kind});
                if let Some(name) = name {
                    atom["name"] = name.into();
                }
                if let Some(scheduling) = scheduling {
                    atom["scheduling"] = scheduling;
                }
                let routes: Vec<_> = routes
                    .into_iter()
                    .map(|(m, p)| serde_json::json!({"method": m, "path_prefix": p}))
                    .collect();
                atom["routes"] = routes.into();
                atom["allow_tags"] = allow.into();
                atom["deny_tags"] = deny.into();
                atom
            })
    }

    proptest! {
        #[test]
        fn render_then_parse_round_trips(configs in proptest::collection::vec(arb_config(), 0..6)) {
            let configs = dedup_daemons(configs);
            let parsed = parse_configuration(&render_configuration(&configs)).unwrap();
            prop_assert_eq!(parsed, configs);
        }

        #[test]
        fn accepted_configs_satisfy_invariants(atoms in proptest::collection::vec(arb_raw_atom(), 0..5)) {
            let doc = serde_json::json!({ "atoms": atoms }).to_string();
            if let Ok(configs) = parse_configuration(&doc) {
                for config in configs {
                    prop_assert!(config.validate().is_ok());
                    prop_assert!(config.hosts.allow_tags.is_disjoint(&config.hosts.deny_tags));
                    match config.kind {
                        AtomKind::Daemon => prop_assert!(
                            config.name.is_some() && config.scheduling.is_none() && config.routes.is_empty()
                        ),
                        AtomKind::Reactive => prop_assert!(
                            config.name.is_none() && config.scheduling.is_some() && !config.routes.is_empty()
                        ),
                    }
                }
            }
        }
    }
}
