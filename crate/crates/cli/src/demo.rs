//! One-command local KV deployment: three node processes, the KV app and
//! a readiness probe.

use std::path::Path;
use std::time::Duration;

use anyhow::{bail, Context};
use radon_core::client::HttpClient;
use radon_core::model::render_configuration;
use radon_core::storage::Durability;
use radon_kvstore::{application, validate_replication};

use crate::process::ProcessCluster;

pub const RING_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Clone)]
pub struct DemoOptions {
    pub nodes: usize,
    pub kvnodes_per_node: usize,
    pub replication: usize,
    pub durability: Durability,
}

impl Default for DemoOptions {
    fn default() -> Self {
        Self {
            nodes: 3,
            kvnodes_per_node: 8,
            replication: 2,
            durability: Durability::Async,
        }
    }
}

pub struct Demo {
    pub cluster: ProcessCluster,
    pub members: Vec<String>,
}

/// Ring members as reported by the frontend on `http`, empty until the
/// frontend has a view.
pub async fn ring_members(http: &str) -> Vec<String> {
    let Ok(mut client) = HttpClient::connect(http).await else {
        return Vec::new();
    };
    let Ok((200, body)) = client.get("/ring").await else {
        return Vec::new();
    };
    let Ok(value) = serde_json::from_slice::<serde_json::Value>(&body) else {
        return Vec::new();
    };
    value["members"]
        .as_array()
        .map(|m| m.iter().filter_map(|v| v.as_str().map(str::to_string)).collect())
        .unwrap_or_default()
}

/// Polls every frontend until each reports `expected` ring members.
pub async fn wait_ring(https: &[String], expected: usize, timeout: Duration) -> anyhow::Result<Vec<String>> {
    let deadline = tokio::time::Instant::now() + timeout;
    let mut members = Vec::new();
    for http in https {
        loop {
            members = ring_members(http).await;
            if members.len() >= expected {
                break;
            }
            if tokio::time::Instant::now() >= deadline {
                bail!("ring at {http} has {} of {expected} members", members.len());
            }
            tokio::time::sleep(Duration::from_millis(100)).await;
        }
    }
    Ok(members)
}

/// Starts the demo cluster under `dir` and deploys the KV store on it.
/// Returns once a probe write can be read back through every node.
pub async fn demo_up(node_bin: &Path, dir: &Path, options: &DemoOptions) -> anyhow::Result<Demo> {
    let total = options.nodes * options.kvnodes_per_node;
    validate_replication(options.replication, total)?;
    if options.nodes == 0 {
        bail!("at least one node is required");
    }
    let app = application("n1", options.kvnodes_per_node, options.replication);
    let mut cluster = ProcessCluster::launch(node_bin, dir, options.nodes, options.durability).await?;
    std::fs::write(dir.join("app.json"), render_configuration(&app))?;
    let report = cluster.deploy(&app).await;
    if let Some(failed) = report.iter().find(|p| !p.ok) {
        cluster.shutdown().await;
        bail!("deploying {} failed: {}", failed.definition, failed.message);
    }
    let https = cluster.http_addrs();
    let members = match wait_ring(&https, total, RING_TIMEOUT).await {
        Ok(members) => members,
        Err(e) => {
            cluster.shutdown().await;
            return Err(e);
        }
    };
    let probe = async {
        let mut first = HttpClient::connect(&https[0]).await?;
        let (status, _) = first.put("/kv/__demo_probe", "ok").await?;
        if status != 200 {
            bail!("probe write answered {status}");
        }
        for http in &https {
            let mut client = HttpClient::connect(http).await?;
            let (status, body) = client.get("/kv/__demo_probe").await?;
            if status != 200 || &body[..] != b"ok" {
                bail!("probe read from {http} answered {status}");
            }
        }
        anyhow::Ok(())
    };
    if let Err(e) = probe.await.context("readiness probe") {
        cluster.shutdown().await;
        return Err(e);
    }
    Ok(Demo { cluster, members })
}
