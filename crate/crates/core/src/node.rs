//! A complete runtime node: storage, naming, messaging, engine, mesh and
//! gateway wired together.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use futures::future::BoxFuture;
use futures::FutureExt;
use tokio::net::TcpListener;

use crate::engine::{AtomDefinition, Engine, EngineError, EngineOptions, HaltReason, InProcessEngine, ModuleEngine};
use crate::gateway::{Gateway, StatsSource, DEFAULT_RESPONSE_TIMEOUT};
use crate::messaging::Messaging;
use crate::model::{parse_configuration, AtomConfiguration, AtomKind};
use crate::naming::Naming;
use crate::storage::{Durability, Storage, StorageError};
use crate::transport::{Mesh, NodeInfo, SpawnHandler};

pub struct NodeConfig {
    pub me: NodeInfo,
    pub cluster: Vec<NodeInfo>,
    /// `None` keeps the store in memory.
    pub data_dir: Option<PathBuf>,
    pub durability: Durability,
    pub response_timeout: Duration,
    pub engine: EngineOptions,
}

impl NodeConfig {
    pub fn new(me: NodeInfo, cluster: Vec<NodeInfo>) -> Self {
        Self {
            me,
            cluster,
            data_dir: None,
            durability: Durability::Sync,
            response_timeout: DEFAULT_RESPONSE_TIMEOUT,
            engine: EngineOptions::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum NodeError {
    #[error("cannot bind {address}: {source}")]
    Bind {
        address: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Storage(#[from] StorageError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

pub struct Node {
    engine: Engine,
    mesh: Mesh,
    gateway: Option<Gateway>,
}

/// Applies one configuration on the local engine.
pub async fn apply_configuration(engine: &Engine, config: AtomConfiguration) -> Result<String, EngineError> {
    match config.kind {
        AtomKind::Daemon => engine.spawn_daemon(config).await.map(|name| name.to_string()),
        AtomKind::Reactive => {
            let definition = config.definition.clone();
            engine.install_reactive(config)?;
            Ok(format!("installed {definition}"))
        }
    }
}

struct Spawner {
    engine: Engine,
}

impl SpawnHandler for Spawner {
    fn spawn(&self, document: String) -> BoxFuture<'static, Result<String, String>> {
        let engine = self.engine.clone();
        async move {
            let configs = parse_configuration(&document).map_err(|e| e.to_string())?;
            let mut outcomes = Vec::new();
            for config in configs {
                outcomes.push(apply_configuration(&engine, config).await.map_err(|e| e.to_string())?);
            }
            Ok(outcomes.join(","))
        }
        .boxed()
    }
}

async fn bind(address: &str) -> Result<TcpListener, NodeError> {
    TcpListener::bind(address).await.map_err(|source| NodeError::Bind {
        address: address.to_string(),
        source,
    })
}

impl Node {
    /// Binds the peer listener and, if the node has an HTTP address, the
    /// gateway, then starts everything.
    pub async fn start(config: NodeConfig, definitions: Vec<AtomDefinition>) -> Result<Self, NodeError> {
        let peer = bind(&config.me.listen_address).await?;
        let http = match &config.me.http_address {
            Some(address) => Some(bind(address).await?),
            None => None,
        };
        Self::start_with(config, definitions, peer, http)
    }

    /// Starts on already bound listeners. Must run inside a tokio runtime.
    pub fn start_with(
        config: NodeConfig,
        definitions: Vec<AtomDefinition>,
        peer: TcpListener,
        http: Option<TcpListener>,
    ) -> Result<Self, NodeError> {
        let storage = match &config.data_dir {
            Some(dir) => Storage::open(dir, config.durability)?,
            None => Storage::in_memory(),
        };
        let naming = Arc::new(Naming::new(config.me.node_id.clone()));
        let messaging = Arc::new(Messaging::new(naming.clone()));
        let modules = Arc::new(InProcessEngine::new());
        for definition in definitions {
            modules.register(definition)?;
        }
        let engine = Engine::new(
            config.me.tags.clone(),
            naming.clone(),
            messaging.clone(),
            storage,
            modules,
            config.engine,
        );
        let mesh = Mesh::start(peer, config.me, config.cluster, naming, messaging);
        mesh.set_spawn_handler(Arc::new(Spawner {
            engine: engine.clone(),
        }));
        let gateway = match http {
            Some(listener) => {
                let mesh_view = mesh.clone();
                let stats: StatsSource = Arc::new(move || {
                    serde_json::json!({
                        "peers": mesh_view.connected_peers(),
                        "connections_established": mesh_view.connections_established(),
                    })
                });
                Some(Gateway::start(listener, engine.clone(), config.response_timeout, Some(stats))?)
            }
            None => None,
        };
        Ok(Self {
            engine,
            mesh,
            gateway,
        })
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    pub fn mesh(&self) -> &Mesh {
        &self.mesh
    }

    pub fn http_addr(&self) -> Option<std::net::SocketAddr> {
        self.gateway.as_ref().map(Gateway::local_addr)
    }

    /// Applies a configuration document directly on this node.
    pub async fn apply(&self, document: &str) -> Result<Vec<String>, String> {
        let configs = parse_configuration(document).map_err(|e| e.to_string())?;
        let mut outcomes = Vec::new();
        for config in configs {
            outcomes.push(apply_configuration(&self.engine, config).await.map_err(|e| e.to_string())?);
        }
        Ok(outcomes)
    }

    /// Resolves when the engine halts.
    pub async fn halted(&self) -> HaltReason {
        self.engine.halted().await
    }

    pub fn shutdown(&self) {
        self.engine.shutdown();
        if let Some(gateway) = &self.gateway {
            gateway.shutdown();
        }
        self.mesh.shutdown();
        let _ = self.engine.storage().flush();
    }
}
