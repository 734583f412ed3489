//! Deployer: places each configuration on its eligible nodes.

use std::collections::HashMap;
use std::time::Duration;

use bytes::BytesMut;
use serde::Serialize;
use tokio::net::tcp::{OwnedReadHalf, OwnedWriteHalf};
use tokio::net::TcpStream;

use super::{read_frame, write_frame, Frame, NodeInfo, Role, PROTOCOL_VERSION};
use crate::model::{render_configuration, AtomConfiguration, AtomKind, NodeId};

const REPLY_TIMEOUT: Duration = Duration::from_secs(30);

/// Outcome of placing one configuration on one node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Placement {
    pub definition: String,
    pub kind: AtomKind,
    /// `None` when no node was eligible.
    pub node: Option<NodeId>,
    pub ok: bool,
    pub message: String,
}

/// Nodes admitted by a configuration's host list and tag constraints.
pub fn eligible_nodes<'a>(config: &AtomConfiguration, cluster: &'a [NodeInfo]) -> Vec<&'a NodeInfo> {
    cluster
        .iter()
        .filter(|n| config.hosts.admits(n.node_id.as_str(), &n.tags))
        .collect()
}

struct Session {
    reader: OwnedReadHalf,
    writer: OwnedWriteHalf,
    buf: BytesMut,
}

async fn open(node: &NodeInfo) -> Result<Session, String> {
    let stream = tokio::time::timeout(Duration::from_secs(5), TcpStream::connect(&node.listen_address))
        .await
        .map_err(|_| format!("connect to {} timed out", node.listen_address))?
        .map_err(|e| format!("connect to {}: {e}", node.listen_address))?;
    stream.set_nodelay(true).map_err(|e| e.to_string())?;
    let (mut reader, mut writer) = stream.into_split();
    let hello = Frame::Hello {
        version: PROTOCOL_VERSION,
        role: Role::Client,
        node_id: NodeId::new("deployer").expect("valid id"),
        tags: Vec::new(),
    };
    write_frame(&mut writer, &hello).await.map_err(|e| e.to_string())?;
    let mut buf = BytesMut::new();
    match read_frame(&mut reader, &mut buf).await {
        Ok(Some(Frame::Hello { node_id, .. })) if node_id == node.node_id => Ok(Session {
            reader,
            writer,
            buf,
        }),
        Ok(Some(Frame::Hello { node_id, .. })) => {
            Err(format!("expected node {} but reached {node_id}", node.node_id))
        }
        Ok(Some(Frame::Refuse { reason })) => Err(format!("refused: {reason}")),
        Ok(_) => Err("bad handshake".into()),
        Err(e) => Err(e.to_string()),
    }
}

async fn request(session: &mut Session, request_id: u64, document: String) -> Result<String, String> {
    write_frame(&mut session.writer, &Frame::SpawnRequest { request_id, document })
        .await
        .map_err(|e| e.to_string())?;
    loop {
        let frame = tokio::time::timeout(REPLY_TIMEOUT, read_frame(&mut session.reader, &mut session.buf))
            .await
            .map_err(|_| "no reply from node".to_string())?
            .map_err(|e| e.to_string())?;
        match frame {
            Some(Frame::SpawnReply {
                request_id: id,
                ok,
                message,
            }) if id == request_id => return if ok { Ok(message) } else { Err(message) },
            Some(_) => continue,
            None => return Err("connection closed".into()),
        }
    }
}

/// Sends every configuration to each of its eligible nodes, one request at
/// a time. Failures are reported per placement; deployment continues.
pub async fn deploy(configs: &[AtomConfiguration], cluster: &[NodeInfo]) -> Vec<Placement> {
    let mut sessions: HashMap<NodeId, Session> = HashMap::new();
    let mut report = Vec::new();
    let mut next_id = 1u64;
    for config in configs {
        let eligible = eligible_nodes(config, cluster);
        if eligible.is_empty() {
            report.push(Placement {
                definition: config.definition.clone(),
                kind: config.kind,
                node: None,
                ok: false,
                message: "no eligible node".into(),
            });
            continue;
        }
        let document = render_configuration(std::slice::from_ref(config));
        for node in eligible {
            let outcome = async {
                if !sessions.contains_key(&node.node_id) {
                    let session = open(node).await?;
                    sessions.insert(node.node_id.clone(), session);
                }
                let session = sessions.get_mut(&node.node_id).expect("just inserted");
                next_id += 1;
                let result = request(session, next_id, document.clone()).await;
                if result.is_err() && session_broken(&result) {
                    sessions.remove(&node.node_id);
                }
                result
            }
            .await;
            let (ok, message) = match outcome {
                Ok(m) => (true, m),
                Err(m) => (false, m),
            };
            report.push(Placement {
                definition: config.definition.clone(),
                kind: config.kind,
                node: Some(node.node_id.clone()),
                ok,
                message,
            });
        }
    }
    report
}

fn session_broken(result: &Result<String, String>) -> bool {
    matches!(result, Err(m) if m == "connection closed" || m == "no reply from node")
}
