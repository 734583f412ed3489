//! Deployment documents and offline store inspection for the KV store.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use radon_core::engine::AtomDefinition;
use radon_core::model::{AtomConfiguration, EventRoute, RecoveryPolicy, SchedulingPolicy};

use crate::coordinator::{Coordinator, COORDINATOR};
use crate::frontend::{KvFrontend, KV_PREFIX, RING_PATH};
use crate::kvnode::{live_value, KvNode};

pub const KVNODE: &str = "kvnode";
pub const KVFRONTEND: &str = "kvfrontend";
pub const FRONTEND_IDLE: Duration = Duration::from_secs(5);

pub fn definitions() -> Vec<AtomDefinition> {
    vec![
        AtomDefinition::new(COORDINATOR, Coordinator),
        AtomDefinition::new(KVNODE, KvNode),
        AtomDefinition::new(KVFRONTEND, KvFrontend),
    ]
}

/// Name template of the `slot`-th storage daemon on each node.
pub fn kvnode_template(slot: usize) -> String {
    format!("{KVNODE}/{{node}}/{slot}")
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AppError {
    #[error("replication factor must be at least 1")]
    ZeroReplication,
    #[error("replication factor {replication} exceeds the {members} storage instances")]
    ReplicationTooLarge { replication: usize, members: usize },
}

/// Checks a replication factor against the number of storage daemons the
/// deployment will create.
pub fn validate_replication(replication: usize, members: usize) -> Result<(), AppError> {
    if replication == 0 {
        return Err(AppError::ZeroReplication);
    }
    if replication > members {
        return Err(AppError::ReplicationTooLarge {
            replication,
            members,
        });
    }
    Ok(())
}

/// The KV deployment: one coordinator on `coordinator_host`,
/// `kvnodes_per_node` storage daemons on every node and the frontend
/// routes everywhere.
pub fn application(
    coordinator_host: &str,
    kvnodes_per_node: usize,
    replication: usize,
) -> Vec<AtomConfiguration> {
    let mut configs = vec![AtomConfiguration::daemon(COORDINATOR, COORDINATOR)
        .with_hosts(&[coordinator_host])
        .with_recovery(RecoveryPolicy::Restart)
        .with_arg("replication", replication)];
    for slot in 0..kvnodes_per_node {
        configs.push(
            AtomConfiguration::daemon(KVNODE, &kvnode_template(slot))
                .with_recovery(RecoveryPolicy::Restart),
        );
    }
    configs.push(frontend());
    configs
}

pub fn frontend() -> AtomConfiguration {
    let prefix = KV_PREFIX.trim_end_matches('/');
    AtomConfiguration::reactive(
        KVFRONTEND,
        SchedulingPolicy::OnDemandExpire {
            idle_timeout: Some(FRONTEND_IDLE),
            max_events: None,
        },
        vec![
            EventRoute::new("PUT", prefix),
            EventRoute::new("GET", prefix),
            EventRoute::new("GET", RING_PATH),
        ],
    )
}

/// Which storage instances hold a live copy of each key, given raw store
/// entries from any number of nodes and the instance names to look for.
pub fn placements<'a>(
    entries: impl IntoIterator<Item = &'a (Vec<u8>, Vec<u8>)>,
    instances: &[String],
) -> BTreeMap<Vec<u8>, BTreeSet<String>> {
    let prefixes: Vec<(Vec<u8>, &String)> = instances
        .iter()
        .map(|name| (format!("{name}/").into_bytes(), name))
        .collect();
    let mut out: BTreeMap<Vec<u8>, BTreeSet<String>> = BTreeMap::new();
    for (key, value) in entries {
        if live_value(value).is_none() {
            continue;
        }
        for (prefix, name) in &prefixes {
            if let Some(user_key) = key.strip_prefix(prefix.as_slice()) {
                out.entry(user_key.to_vec()).or_default().insert((*name).clone());
                break;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use radon_core::model::{parse_configuration, render_configuration, AtomKind};

    #[test]
    fn application_document_round_trips() {
        let configs = application("n1", 8, 2);
        assert_eq!(configs.len(), 10);
        assert_eq!(configs[0].args.get("replication").map(String::as_str), Some("2"));
        assert_eq!(configs.iter().filter(|c| c.kind == AtomKind::Daemon).count(), 9);
        let text = render_configuration(&configs);
        assert_eq!(parse_configuration(&text).unwrap(), configs);
    }

    #[test]
    fn replication_validation() {
        assert_eq!(validate_replication(2, 24), Ok(()));
        assert_eq!(validate_replication(24, 24), Ok(()));
        assert_eq!(
            validate_replication(25, 24),
            Err(AppError::ReplicationTooLarge {
                replication: 25,
                members: 24
            })
        );
        assert_eq!(validate_replication(0, 3), Err(AppError::ZeroReplication));
    }

    #[test]
    fn placements_skip_tombstones_and_index() {
        let entries = vec![
            (b"kvnode/n1/1/a".to_vec(), b"\x01x".to_vec()),
            (b"kvnode/n1/10/a".to_vec(), b"\x01x".to_vec()),
            (b"kvnode/n2/0/a".to_vec(), b"\x00".to_vec()),
            (b"kvnode/n2/0/b".to_vec(), b"\x01y".to_vec()),
            (b"kvnode/n2/0#index/0".to_vec(), b"\x00\x00\x00\x01a".to_vec()),
        ];
        let instances: Vec<String> = ["kvnode/n1/1", "kvnode/n1/10", "kvnode/n2/0"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let found = placements(&entries, &instances);
        assert_eq!(found.len(), 2);
        assert_eq!(found[&b"a".to_vec()].len(), 2);
        assert_eq!(
            found[&b"b".to_vec()].iter().collect::<Vec<_>>(),
            vec!["kvnode/n2/0"]
        );
    }
}
