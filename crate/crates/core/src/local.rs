//! In-process multi-node clusters on loopback, for tests and tools.

use std::path::PathBuf;
use std::time::Duration;

use tokio::net::TcpListener;

use crate::engine::{AtomDefinition, EngineOptions};
use crate::model::AtomConfiguration;
use crate::node::{Node, NodeConfig, NodeError};
use crate::storage::Durability;
use crate::transport::{deploy, NodeInfo, Placement};

pub struct LocalOptions {
    pub http: bool,
    pub data_root: Option<PathBuf>,
    pub durability: Durability,
    pub tags: Vec<Vec<String>>,
    pub engine: fn() -> EngineOptions,
}

impl Default for LocalOptions {
    fn default() -> Self {
        Self {
            http: true,
            data_root: None,
            durability: Durability::Async,
            tags: Vec::new(),
            engine: EngineOptions::default,
        }
    }
}

pub struct LocalCluster {
    pub infos: Vec<NodeInfo>,
    pub nodes: Vec<Node>,
}

impl LocalCluster {
    /// Starts `n` connected nodes named `n1..`, each loaded with the
    /// definitions returned by `definitions`.
    pub async fn start(
        n: usize,
        options: LocalOptions,
        definitions: impl Fn() -> Vec<AtomDefinition>,
    ) -> Result<Self, NodeError> {
        let mut listeners = Vec::new();
        let mut infos = Vec::new();
        for i in 0..n {
            let peer = TcpListener::bind("127.0.0.1:0").await?;
            let mut info = NodeInfo::new(&format!("n{}", i + 1), &peer.local_addr()?.to_string());
            if let Some(tags) = options.tags.get(i) {
                info.tags = tags.iter().cloned().collect();
            }
            let http = if options.http {
                let listener = TcpListener::bind("127.0.0.1:0").await?;
                info.http_address = Some(listener.local_addr()?.to_string());
                Some(listener)
            } else {
                None
            };
            listeners.push((peer, http));
            infos.push(info);
        }
        let mut nodes = Vec::new();
        for (info, (peer, http)) in infos.iter().zip(listeners) {
            let mut config = NodeConfig::new(info.clone(), infos.clone());
            config.durability = options.durability;
            config.data_dir = options
                .data_root
                .as_ref()
                .map(|root| root.join(info.node_id.as_str()));
            config.engine = (options.engine)();
            nodes.push(Node::start_with(config, definitions(), peer, http)?);
        }
        let cluster = Self { infos, nodes };
        for node in &cluster.nodes {
            if !node.mesh().wait_connected(Duration::from_secs(10)).await {
                return Err(NodeError::Io(std::io::Error::new(
                    std::io::ErrorKind::TimedOut,
                    "mesh did not connect",
                )));
            }
        }
        Ok(cluster)
    }

    pub async fn deploy(&self, configs: &[AtomConfiguration]) -> Vec<Placement> {
        deploy(configs, &self.infos).await
    }

    pub fn http_addrs(&self) -> Vec<String> {
        self.nodes
            .iter()
            .filter_map(|n| n.http_addr().map(|a| a.to_string()))
            .collect()
    }

    /// Waits until every node holds an identical registry.
    pub async fn converged(&self, timeout: Duration) -> bool {
        let deadline = tokio::time::Instant::now() + timeout;
        loop {
            let digests: Vec<u64> = self
                .nodes
                .iter()
                .map(|n| n.engine().naming().snapshot().digest())
                .collect();
            if digests.windows(2).all(|w| w[0] == w[1]) {
                return true;
            }
            if tokio::time::Instant::now() >= deadline {
                return false;
            }
            tokio::time::sleep(Duration::from_millis(10)).await;
        }
    }

    pub fn shutdown(&self) {
        for node in &self.nodes {
            node.shutdown();
        }
    }
}
