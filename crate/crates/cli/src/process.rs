//! Runs cluster nodes as separate `radon-node` processes on loopback.

use std::fs::File;
use std::path::{Path, PathBuf};
use std::process::{ExitStatus, Stdio};
use std::time::Duration;

use anyhow::{bail, Context};
use radon_bench::server_stats;
use radon_core::model::AtomConfiguration;
use radon_core::storage::Durability;
use radon_core::transport::{deploy, ClusterFile, NodeInfo, Placement};
use tokio::process::{Child, Command};

pub const READY_TIMEOUT: Duration = Duration::from_secs(20);

/// Reserves `n` distinct loopback ports. They are released before
/// returning, so a racing process could in principle take one.
pub fn free_ports(n: usize) -> std::io::Result<Vec<u16>> {
    let listeners: Vec<std::net::TcpListener> = (0..n)
        .map(|_| std::net::TcpListener::bind("127.0.0.1:0"))
        .collect::<Result<_, _>>()?;
    listeners.iter().map(|l| Ok(l.local_addr()?.port())).collect()
}

fn durability_flag(durability: Durability) -> &'static str {
    match durability {
        Durability::Sync => "sync",
        Durability::Async => "async",
    }
}

pub struct ProcessNode {
    pub info: NodeInfo,
    pub data_dir: PathBuf,
    pub log: PathBuf,
    child: Option<Child>,
}

impl ProcessNode {
    pub fn http(&self) -> String {
        self.info.http_address.clone().unwrap_or_default()
    }

    pub fn pid(&self) -> Option<u32> {
        self.child.as_ref().and_then(Child::id)
    }
}

pub struct ProcessCluster {
    pub dir: PathBuf,
    pub cluster_file: PathBuf,
    pub nodes: Vec<ProcessNode>,
    node_bin: PathBuf,
    durability: Durability,
}

impl ProcessCluster {
    /// Writes `dir/cluster.json` for `n` nodes named `n1..` and starts one
    /// process per node. Children are killed when the cluster is dropped.
    pub async fn launch(node_bin: &Path, dir: &Path, n: usize, durability: Durability) -> anyhow::Result<Self> {
        std::fs::create_dir_all(dir)?;
        let ports = free_ports(2 * n)?;
        let infos: Vec<NodeInfo> = (0..n)
            .map(|i| {
                NodeInfo::new(&format!("n{}", i + 1), &format!("127.0.0.1:{}", ports[2 * i]))
                    .with_http(&format!("127.0.0.1:{}", ports[2 * i + 1]))
            })
            .collect();
        let cluster_file = dir.join("cluster.json");
        std::fs::write(&cluster_file, ClusterFile { nodes: infos.clone() }.render())?;
        let mut cluster = Self {
            dir: dir.to_path_buf(),
            cluster_file,
            nodes: infos
                .into_iter()
                .map(|info| ProcessNode {
                    data_dir: dir.join(info.node_id.as_str()),
                    log: dir.join(format!("{}.log", info.node_id)),
                    info,
                    child: None,
                })
                .collect(),
            node_bin: node_bin.to_path_buf(),
            durability,
        };
        for i in 0..n {
            cluster.spawn(i)?;
        }
        cluster.wait_ready(READY_TIMEOUT).await?;
        Ok(cluster)
    }

    fn spawn(&mut self, i: usize) -> anyhow::Result<()> {
        let node = &mut self.nodes[i];
        let log = File::options().create(true).append(true).open(&node.log)?;
        let child = Command::new(&self.node_bin)
            .arg("--id")
            .arg(node.info.node_id.as_str())
            .arg("--cluster")
            .arg(&self.cluster_file)
            .arg("--data-dir")
            .arg(&node.data_dir)
            .arg("--durability")
            .arg(durability_flag(self.durability))
            .stdin(Stdio::null())
            .stdout(log.try_clone()?)
            .stderr(log)
            .kill_on_drop(true)
            .spawn()
            .with_context(|| format!("cannot start {}", self.node_bin.display()))?;
        node.child = Some(child);
        Ok(())
    }

    pub fn infos(&self) -> Vec<NodeInfo> {
        self.nodes.iter().map(|n| n.info.clone()).collect()
    }

    pub fn http_addrs(&self) -> Vec<String> {
        self.nodes.iter().map(ProcessNode::http).collect()
    }

    /// Waits until every running node answers `/_radon/stats` and sees all
    /// of its running peers.
    pub async fn wait_ready(&mut self, timeout: Duration) -> anyhow::Result<()> {
        let deadline = tokio::time::Instant::now() + timeout;
        let running: Vec<usize> = (0..self.nodes.len()).filter(|&i| self.nodes[i].child.is_some()).collect();
        for &i in &running {
            loop {
                if let Some(status) = self.try_status(i) {
                    bail!("{} exited during startup ({status}); see {}", self.nodes[i].info.node_id, self.nodes[i].log.display());
                }
                if let Some(stats) = server_stats(&self.nodes[i].http()).await {
                    let peers = stats["peers"].as_array().map_or(0, Vec::len);
                    if peers + 1 >= running.len() {
                        break;
                    }
                }
                if tokio::time::Instant::now() >= deadline {
                    bail!("{} not ready within {timeout:?}", self.nodes[i].info.node_id);
                }
                tokio::time::sleep(Duration::from_millis(50)).await;
            }
        }
        Ok(())
    }

    pub async fn deploy(&self, configs: &[AtomConfiguration]) -> Vec<Placement> {
        deploy(configs, &self.infos()).await
    }

    fn signal(&self, i: usize, signal: libc::c_int) -> anyhow::Result<()> {
        let pid = self.nodes[i].pid().context("node is not running")?;
        // SAFETY: plain kill(2) on a child we spawned and have not reaped.
        if unsafe { libc::kill(pid as libc::pid_t, signal) } != 0 {
            return Err(std::io::Error::last_os_error().into());
        }
        Ok(())
    }

    /// Sends SIGKILL and reaps the process.
    pub async fn kill(&mut self, i: usize) -> anyhow::Result<ExitStatus> {
        self.signal(i, libc::SIGKILL)?;
        self.wait(i, Duration::from_secs(10)).await
    }

    /// Sends SIGTERM and waits for the process to exit.
    pub async fn terminate(&mut self, i: usize, timeout: Duration) -> anyhow::Result<ExitStatus> {
        self.signal(i, libc::SIGTERM)?;
        self.wait(i, timeout).await
    }

    pub async fn wait(&mut self, i: usize, timeout: Duration) -> anyhow::Result<ExitStatus> {
        let child = self.nodes[i].child.as_mut().context("node is not running")?;
        let status = tokio::time::timeout(timeout, child.wait())
            .await
            .context("node did not exit in time")??;
        self.nodes[i].child = None;
        Ok(status)
    }

    /// Exit status if the node has already stopped.
    pub fn try_status(&mut self, i: usize) -> Option<ExitStatus> {
        let status = self.nodes[i].child.as_mut()?.try_wait().ok()??;
        self.nodes[i].child = None;
        Some(status)
    }

    /// Starts a stopped node again on the same ports and data directory.
    pub async fn restart(&mut self, i: usize) -> anyhow::Result<()> {
        if self.nodes[i].child.is_some() {
            bail!("{} is still running", self.nodes[i].info.node_id);
        }
        self.spawn(i)?;
        self.wait_ready(READY_TIMEOUT).await
    }

    /// Stops every node with SIGTERM, falling back to SIGKILL.
    pub async fn shutdown(&mut self) {
        for i in 0..self.nodes.len() {
            if self.nodes[i].child.is_some() && self.terminate(i, Duration::from_secs(5)).await.is_err() {
                let _ = self.kill(i).await;
            }
        }
    }
}

pub const ECHO_READY_PREFIX: &str = "listening on ";

/// A native echo server running as `radon-bench echo-server`.
pub struct EchoProcess {
    pub addr: String,
    child: Child,
}

impl EchoProcess {
    pub async fn spawn(bench_bin: &Path) -> anyhow::Result<Self> {
        use tokio::io::{AsyncBufReadExt, BufReader};
        let mut child = Command::new(bench_bin)
            .args(["echo-server", "--listen", "127.0.0.1:0"])
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .kill_on_drop(true)
            .spawn()
            .with_context(|| format!("cannot start {}", bench_bin.display()))?;
        let stdout = child.stdout.take().context("no stdout")?;
        let mut lines = BufReader::new(stdout).lines();
        let line = tokio::time::timeout(Duration::from_secs(10), lines.next_line())
            .await
            .context("echo server did not report its address")??
            .context("echo server exited")?;
        let addr = line
            .strip_prefix(ECHO_READY_PREFIX)
            .with_context(|| format!("unexpected echo server output {line:?}"))?
            .trim()
            .to_string();
        Ok(Self { addr, child })
    }

    pub async fn stop(mut self) {
        let _ = self.child.kill().await;
    }
}
