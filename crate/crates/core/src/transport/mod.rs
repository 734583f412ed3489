//! Static full-mesh connectivity between runtime nodes.
//!
//! For every pair of nodes the one with the lower id dials, so a cluster of
//! n nodes holds n(n-1)/2 connections. Each connection has one writer task
//! fed by an unbounded queue and one reader processing frames in arrival
//! order, which keeps per-pair FIFO for envelopes and registry deltas alike.

pub mod cluster;
pub mod deploy;
pub mod frame;

use std::collections::HashMap;
use std::io;
use std::sync::atomic::{AtomicU64, Ordering as AtomicOrdering};
use std::sync::Arc;
use std::time::Duration;

use bytes::BytesMut;
use futures::future::BoxFuture;
use futures::FutureExt;
use parking_lot::{Mutex, RwLock};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::tcp::{OwnedReadHalf, OwnedWriteHalf};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, oneshot, watch};

pub use cluster::{ClusterError, ClusterFile, NodeInfo};
pub use deploy::{deploy, eligible_nodes, Placement};
pub use frame::{Frame, FrameError, Role, MAX_FRAME, PROTOCOL_VERSION};

use crate::messaging::{Messaging, Outbound, RemoteDelivery};
use crate::model::NodeId;
use crate::naming::{Naming, Propagator, RegistryDelta};

pub const REDIAL_INTERVAL: Duration = Duration::from_millis(200);
const HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(5);
const WRITE_BATCH: usize = 256 * 1024;

/// Executes configuration documents sent by a deployer.
pub trait SpawnHandler: Send + Sync {
    /// Returns a human-readable outcome, e.g. the spawned instance name.
    fn spawn(&self, document: String) -> BoxFuture<'static, Result<String, String>>;
}

struct Link {
    tx: mpsc::UnboundedSender<Frame>,
    epoch: u64,
}

struct MeshInner {
    me: NodeInfo,
    cluster: Vec<NodeInfo>,
    naming: Arc<Naming>,
    messaging: Arc<Messaging>,
    links: RwLock<HashMap<NodeId, Link>>,
    barriers: Mutex<HashMap<u64, (NodeId, oneshot::Sender<()>)>>,
    next_nonce: AtomicU64,
    next_epoch: AtomicU64,
    established: AtomicU64,
    spawn: RwLock<Option<Arc<dyn SpawnHandler>>>,
    membership: watch::Sender<usize>,
    shutdown: watch::Sender<bool>,
}

/// Handle on a node's mesh endpoint.
#[derive(Clone)]
pub struct Mesh {
    inner: Arc<MeshInner>,
}

impl Propagator for MeshInner {
    fn broadcast(&self, delta: &RegistryDelta) {
        let frame = Frame::from(delta.clone());
        for link in self.links.read().values() {
            let _ = link.tx.send(frame.clone());
        }
    }

    fn barrier(&self) -> BoxFuture<'static, ()> {
        let mut waits = Vec::new();
        {
            let links = self.links.read();
            let mut barriers = self.barriers.lock();
            for (node, link) in links.iter() {
                let nonce = self.next_nonce.fetch_add(1, AtomicOrdering::Relaxed);
                let (tx, rx) = oneshot::channel();
                barriers.insert(nonce, (node.clone(), tx));
                if link.tx.send(Frame::Ping { nonce, reply: false }).is_ok() {
                    waits.push(rx);
                } else {
                    barriers.remove(&nonce);
                }
            }
        }
        async move {
            for wait in waits {
                let _ = wait.await;
            }
        }
        .boxed()
    }
}

impl Outbound for MeshInner {
    fn forward(&self, node: &NodeId, delivery: RemoteDelivery) -> bool {
        self.links
            .read()
            .get(node)
            .is_some_and(|link| link.tx.send(Frame::Envelope(delivery)).is_ok())
    }
}

fn invalid(err: impl std::fmt::Display) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, err.to_string())
}

async fn read_frame(reader: &mut OwnedReadHalf, buf: &mut BytesMut) -> io::Result<Option<Frame>> {
    loop {
        if let Some(frame) = Frame::take(buf).map_err(invalid)? {
            return Ok(Some(frame));
        }
        if buf.capacity() - buf.len() < 4096 {
            buf.reserve(64 * 1024);
        }
        if reader.read_buf(buf).await? == 0 {
            return Ok(None);
        }
    }
}

async fn write_frame(writer: &mut OwnedWriteHalf, frame: &Frame) -> io::Result<()> {
    writer.write_all(&frame.to_bytes()).await
}

async fn write_loop(mut writer: OwnedWriteHalf, mut rx: mpsc::UnboundedReceiver<Frame>) {
    let mut buf = BytesMut::with_capacity(64 * 1024);
    while let Some(frame) = rx.recv().await {
        frame.encode(&mut buf);
        while buf.len() < WRITE_BATCH {
            match rx.try_recv() {
                Ok(frame) => frame.encode(&mut buf),
                Err(_) => break,
            }
        }
        if writer.write_all(&buf).await.is_err() {
            return;
        }
        buf.clear();
    }
    let _ = writer.shutdown().await;
}

impl MeshInner {
    fn hello(&self, role: Role) -> Frame {
        Frame::Hello {
            version: PROTOCOL_VERSION,
            role,
            node_id: self.me.node_id.clone(),
            tags: self.me.tags.iter().cloned().collect(),
        }
    }

    fn is_shut_down(&self) -> bool {
        *self.shutdown.borrow()
    }

    fn publish_membership(&self) {
        let count = self.links.read().len();
        self.membership.send_replace(count);
    }

    /// Attaches a connected peer and serves it until the connection ends.
    async fn run_peer(
        self: Arc<Self>,
        peer: NodeId,
        mut reader: OwnedReadHalf,
        writer: OwnedWriteHalf,
        mut buf: BytesMut,
    ) {
        let (tx, rx) = mpsc::unbounded_channel();
        let epoch = self.next_epoch.fetch_add(1, AtomicOrdering::Relaxed);
        let mut attached = false;
        self.naming.with_local_snapshot(|deltas| {
            let mut links = self.links.write();
            if links.contains_key(&peer) {
                return;
            }
            for delta in deltas {
                let _ = tx.send(Frame::from(delta));
            }
            links.insert(
                peer.clone(),
                Link {
                    tx: tx.clone(),
                    epoch,
                },
            );
            attached = true;
        });
        if !attached {
            tracing::warn!(%peer, "dropping duplicate connection");
            return;
        }
        self.established.fetch_add(1, AtomicOrdering::Relaxed);
        self.publish_membership();
        tracing::info!(%peer, "peer connected");
        tokio::spawn(write_loop(writer, rx));

        let mut shutdown = self.shutdown.subscribe();
        loop {
            let frame = tokio::select! {
                frame = read_frame(&mut reader, &mut buf) => frame,
                _ = shutdown.wait_for(|stop| *stop) => break,
            };
            let frame = match frame {
                Ok(Some(frame)) => frame,
                Ok(None) => break,
                Err(err) => {
                    tracing::warn!(%peer, "connection error: {err}");
                    break;
                }
            };
            match frame.into_delta() {
                Ok(delta) => {
                    if let Some(back) = self.naming.apply_remote(&peer, delta) {
                        let _ = tx.send(Frame::from(back));
                    }
                }
                Err(Frame::Envelope(delivery)) => {
                    let _ = self
                        .messaging
                        .deliver_local(&delivery.target, delivery.incarnation, delivery.envelope);
                }
                Err(Frame::Ping { nonce, reply: false }) => {
                    let _ = tx.send(Frame::Ping { nonce, reply: true });
                }
                Err(Frame::Ping { nonce, reply: true }) => {
                    if let Some((_, done)) = self.barriers.lock().remove(&nonce) {
                        let _ = done.send(());
                    }
                }
                Err(Frame::Refuse { reason }) => {
                    tracing::warn!(%peer, "peer refused: {reason}");
                    break;
                }
                Err(other) => tracing::debug!(%peer, "ignoring unexpected frame {other:?}"),
            }
        }

        {
            let mut links = self.links.write();
            if links.get(&peer).is_some_and(|l| l.epoch == epoch) {
                links.remove(&peer);
            }
        }
        self.barriers.lock().retain(|_, (node, _)| node != &peer);
        self.naming.purge_node(&peer);
        self.publish_membership();
        tracing::info!(%peer, "peer disconnected");
    }

    /// Serves a deployer connection.
    async fn run_client(self: Arc<Self>, mut reader: OwnedReadHalf, writer: OwnedWriteHalf, mut buf: BytesMut) {
        let (tx, rx) = mpsc::unbounded_channel();
        tokio::spawn(write_loop(writer, rx));
        while let Ok(Some(frame)) = read_frame(&mut reader, &mut buf).await {
            let Frame::SpawnRequest { request_id, document } = frame else {
                continue;
            };
            let handler = self.spawn.read().clone();
            let tx = tx.clone();
            tokio::spawn(async move {
                let outcome = match handler {
                    Some(handler) => handler.spawn(document).await,
                    None => Err("node does not accept deployments".to_string()),
                };
                let (ok, message) = match outcome {
                    Ok(m) => (true, m),
                    Err(m) => (false, m),
                };
                let _ = tx.send(Frame::SpawnReply {
                    request_id,
                    ok,
                    message,
                });
            });
        }
    }

    async fn accept(self: Arc<Self>, stream: TcpStream) -> io::Result<()> {
        stream.set_nodelay(true)?;
        let (mut reader, mut writer) = stream.into_split();
        let mut buf = BytesMut::with_capacity(64 * 1024);
        let hello = tokio::time::timeout(HANDSHAKE_TIMEOUT, read_frame(&mut reader, &mut buf))
            .await
            .map_err(|_| invalid("handshake timed out"))??;
        let Some(Frame::Hello {
            version,
            role,
            node_id,
            ..
        }) = hello
        else {
            return Err(invalid("expected hello"));
        };
        let refusal = if version != PROTOCOL_VERSION {
            Some(format!(
                "protocol version mismatch: got {version}, expected {PROTOCOL_VERSION}"
            ))
        } else if role == Role::Peer && !self.cluster.iter().any(|n| n.node_id == node_id) {
            Some(format!("unknown node id {node_id}"))
        } else if role == Role::Peer
            && (node_id == self.me.node_id || self.links.read().contains_key(&node_id))
        {
            Some(format!("duplicate node id {node_id}"))
        } else {
            None
        };
        if let Some(reason) = refusal {
            tracing::warn!(peer = %node_id, "refusing connection: {reason}");
            write_frame(&mut writer, &Frame::Refuse { reason }).await?;
            return Ok(());
        }
        write_frame(&mut writer, &self.hello(Role::Peer)).await?;
        match role {
            Role::Peer => self.run_peer(node_id, reader, writer, buf).await,
            Role::Client => self.run_client(reader, writer, buf).await,
        }
        Ok(())
    }

    async fn dial(&self, peer: &NodeInfo) -> io::Result<(OwnedReadHalf, OwnedWriteHalf, BytesMut)> {
        let stream = tokio::time::timeout(HANDSHAKE_TIMEOUT, TcpStream::connect(&peer.listen_address))
            .await
            .map_err(|_| invalid("connect timed out"))??;
        stream.set_nodelay(true)?;
        let (mut reader, mut writer) = stream.into_split();
        write_frame(&mut writer, &self.hello(Role::Peer)).await?;
        let mut buf = BytesMut::with_capacity(64 * 1024);
        let reply = tokio::time::timeout(HANDSHAKE_TIMEOUT, read_frame(&mut reader, &mut buf))
            .await
            .map_err(|_| invalid("handshake timed out"))??;
        match reply {
            Some(Frame::Hello {
                version, node_id, ..
            }) if version == PROTOCOL_VERSION && node_id == peer.node_id => {
                Ok((reader, writer, buf))
            }
            Some(Frame::Hello { node_id, .. }) => Err(invalid(format!(
                "expected {} at {}, found {node_id}",
                peer.node_id, peer.listen_address
            ))),
            Some(Frame::Refuse { reason }) => Err(invalid(format!("refused: {reason}"))),
            _ => Err(invalid("bad handshake reply")),
        }
    }

    async fn dial_loop(self: Arc<Self>, peer: NodeInfo) {
        let mut last_error = String::new();
        while !self.is_shut_down() {
            match self.dial(&peer).await {
                Ok((reader, writer, buf)) => {
                    last_error.clear();
                    self.clone()
                        .run_peer(peer.node_id.clone(), reader, writer, buf)
                        .await;
                }
                Err(err) => {
                    let message = err.to_string();
                    if message != last_error {
                        tracing::debug!(peer = %peer.node_id, "dial failed: {message}");
                        last_error = message;
                    }
                }
            }
            tokio::time::sleep(REDIAL_INTERVAL).await;
        }
    }
}

impl Mesh {
    /// Starts serving `listener` and dialing every higher-id peer of
    /// `cluster`. Installs itself as the naming propagator and the
    /// messaging outbound path.
    pub fn start(
        listener: TcpListener,
        me: NodeInfo,
        cluster: Vec<NodeInfo>,
        naming: Arc<Naming>,
        messaging: Arc<Messaging>,
    ) -> Self {
        let (membership, _) = watch::channel(0);
        let (shutdown, _) = watch::channel(false);
        let inner = Arc::new(MeshInner {
            me,
            cluster,
            naming: naming.clone(),
            messaging: messaging.clone(),
            links: RwLock::new(HashMap::new()),
            barriers: Mutex::new(HashMap::new()),
            next_nonce: AtomicU64::new(1),
            next_epoch: AtomicU64::new(1),
            established: AtomicU64::new(0),
            spawn: RwLock::new(None),
            membership,
            shutdown,
        });
        naming.set_propagator(inner.clone());
        messaging.set_outbound(inner.clone());

        let acceptor = inner.clone();
        tokio::spawn(async move {
            let mut shutdown = acceptor.shutdown.subscribe();
            loop {
                let accepted = tokio::select! {
                    accepted = listener.accept() => accepted,
                    _ = shutdown.wait_for(|stop| *stop) => return,
                };
                match accepted {
                    Ok((stream, _)) => {
                        let inner = acceptor.clone();
                        tokio::spawn(async move {
                            if let Err(err) = inner.accept(stream).await {
                                tracing::debug!("inbound connection failed: {err}");
                            }
                        });
                    }
                    Err(err) => {
                        tracing::warn!("accept failed: {err}");
                        tokio::time::sleep(Duration::from_millis(50)).await;
                    }
                }
            }
        });

        for peer in inner.cluster.iter() {
            if inner.me.node_id < peer.node_id {
                tokio::spawn(inner.clone().dial_loop(peer.clone()));
            }
        }
        Self { inner }
    }

    pub fn node(&self) -> &NodeInfo {
        &self.inner.me
    }

    pub fn set_spawn_handler(&self, handler: Arc<dyn SpawnHandler>) {
        *self.inner.spawn.write() = Some(handler);
    }

    pub fn connected_peers(&self) -> Vec<NodeId> {
        let mut peers: Vec<_> = self.inner.links.read().keys().cloned().collect();
        peers.sort();
        peers
    }

    /// Number of peer connections established over the mesh lifetime.
    pub fn connections_established(&self) -> u64 {
        self.inner.established.load(AtomicOrdering::Relaxed)
    }

    /// Waits until every other cluster member is connected.
    pub async fn wait_connected(&self, timeout: Duration) -> bool {
        let expected = self
            .inner
            .cluster
            .iter()
            .filter(|n| n.node_id != self.inner.me.node_id)
            .count();
        let mut rx = self.inner.membership.subscribe();
        tokio::time::timeout(timeout, rx.wait_for(|count| *count >= expected))
            .await
            .is_ok_and(|r| r.is_ok())
    }

    /// Stops listening and dialing and drops every connection.
    pub fn shutdown(&self) {
        self.inner.shutdown.send_replace(true);
        self.inner.links.write().clear();
        self.inner.publish_membership();
    }
}
