use std::collections::{BTreeSet, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::NodeId;

/// One runtime node of the static cluster.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeInfo {
    pub node_id: NodeId,
    /// `host:port` of the peer listener.
    pub listen_address: String,
    /// `host:port` of the HTTP gateway, if the node runs one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub http_address: Option<String>,
    #[serde(default)]
    pub tags: BTreeSet<String>,
}

impl NodeInfo {
    pub fn new(node_id: &str, listen_address: &str) -> Self {
        Self {
            node_id: NodeId::new(node_id).expect("valid node id"),
            listen_address: listen_address.to_string(),
            http_address: None,
            tags: BTreeSet::new(),
        }
    }

    pub fn with_tags<'a>(mut self, tags: impl IntoIterator<Item = &'a str>) -> Self {
        self.tags = tags.into_iter().map(str::to_string).collect();
        self
    }

    pub fn with_http(mut self, http_address: &str) -> Self {
        self.http_address = Some(http_address.to_string());
        self
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterFile {
    pub nodes: Vec<NodeInfo>,
}

#[derive(Debug, thiserror::Error)]
pub enum ClusterError {
    #[error("cannot read cluster file: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid cluster file: {0}")]
    Syntax(#[from] serde_json::Error),
    #[error("duplicate node id {0}")]
    DuplicateNode(NodeId),
    #[error("node {0} is not listed in the cluster file")]
    UnknownNode(String),
}

impl ClusterFile {
    pub fn parse(text: &str) -> Result<Self, ClusterError> {
        let file: ClusterFile = serde_json::from_str(text)?;
        let mut seen = HashSet::new();
        for node in &file.nodes {
            if !seen.insert(node.node_id.clone()) {
                return Err(ClusterError::DuplicateNode(node.node_id.clone()));
            }
        }
        Ok(file)
    }

    pub fn load(path: &Path) -> Result<Self, ClusterError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn render(&self) -> String {
        serde_json::to_string_pretty(self).expect("cluster file serializes")
    }

    pub fn node(&self, id: &str) -> Result<&NodeInfo, ClusterError> {
        self.nodes
            .iter()
            .find(|n| n.node_id.as_str() == id)
            .ok_or_else(|| ClusterError::UnknownNode(id.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_render() {
        let file = ClusterFile {
            nodes: vec![
                NodeInfo::new("n1", "127.0.0.1:7001").with_tags(["ssd"]).with_http("127.0.0.1:7101"),
                NodeInfo::new("n2", "127.0.0.1:7002"),
            ],
        };
        assert_eq!(ClusterFile::parse(&file.render()).unwrap(), file);
        assert!(file.node("n2").is_ok());
        assert!(file.node("n9").is_err());
    }

    #[test]
    fn duplicate_ids_rejected() {
        let text = r#"{"nodes":[{"node_id":"n1","listen_address":"a:1"},{"node_id":"n1","listen_address":"a:2"}]}"#;
        assert!(matches!(ClusterFile::parse(text), Err(ClusterError::DuplicateNode(_))));
    }
}
