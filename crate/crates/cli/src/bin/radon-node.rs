use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, Parser, Subcommand};
use radon_cli::{definitions, init_logging};
use radon_core::engine::HaltReason;
use radon_core::node::{Node, NodeConfig};
use radon_core::storage::{self, Durability};
use radon_core::transport::{ClusterFile, NodeInfo};
use tokio::signal::unix::{signal, SignalKind};

/// Runs one Radon runtime node.
#[derive(Parser)]
#[command(name = "radon-node", version, args_conflicts_with_subcommands = true)]
struct Cli {
    #[command(subcommand)]
    command: Option<Command>,
    /// Node id; must appear in the cluster file when one is given.
    #[arg(long)]
    id: Option<String>,
    /// Peer listener address, overriding the cluster file.
    #[arg(long)]
    listen: Option<String>,
    /// Comma separated node tags, overriding the cluster file.
    #[arg(long, value_delimiter = ',')]
    tags: Option<Vec<String>>,
    #[arg(long)]
    cluster: Option<PathBuf>,
    /// Store directory; the store is kept in memory without one.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// HTTP gateway address, overriding the cluster file.
    #[arg(long)]
    http: Option<String>,
    #[arg(long, default_value = "sync")]
    durability: Durability,
}

#[derive(Subcommand)]
enum Command {
    /// Offline store inspection.
    Store {
        #[command(subcommand)]
        action: StoreCommand,
    },
}

#[derive(Subcommand)]
enum StoreCommand {
    /// Prints every live entry as `<hex key> <hex value>`.
    Dump {
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        json: bool,
    },
}

fn dump(dir: &std::path::Path, json: bool) -> ExitCode {
    let entries = match storage::dump(dir) {
        Ok(entries) => entries,
        Err(e) => {
            eprintln!("radon-node: {e}");
            return ExitCode::FAILURE;
        }
    };
    if json {
        let rows: Vec<_> = entries
            .iter()
            .map(|(k, v)| serde_json::json!({"key": hex::encode(k), "value": hex::encode(v)}))
            .collect();
        println!("{}", serde_json::Value::Array(rows));
    } else {
        for (k, v) in entries {
            println!("{} {}", hex::encode(k), hex::encode(v));
        }
    }
    ExitCode::SUCCESS
}

fn node_config(cli: &Cli) -> anyhow::Result<NodeConfig> {
    let id = cli.id.as_deref().unwrap_or_default();
    let (mut me, mut cluster) = match &cli.cluster {
        Some(path) => {
            let file = ClusterFile::load(path)?;
            (file.node(id)?.clone(), file.nodes)
        }
        None => {
            let listen = cli.listen.as_deref().unwrap_or("127.0.0.1:7001");
            (NodeInfo::new(id, listen), Vec::new())
        }
    };
    if let Some(listen) = &cli.listen {
        me.listen_address = listen.clone();
    }
    if let Some(tags) = &cli.tags {
        me.tags = tags.iter().filter(|t| !t.is_empty()).cloned().collect();
    }
    if let Some(http) = &cli.http {
        me.http_address = Some(http.clone());
    }
    cluster.retain(|n| n.node_id != me.node_id);
    cluster.push(me.clone());
    let mut config = NodeConfig::new(me, cluster);
    config.data_dir = cli.data_dir.clone();
    config.durability = cli.durability;
    Ok(config)
}

async fn run(cli: Cli) -> ExitCode {
    let config = match node_config(&cli) {
        Ok(config) => config,
        Err(e) => {
            eprintln!("radon-node: {e}");
            return ExitCode::FAILURE;
        }
    };
    let id = config.me.node_id.clone();
    let listen = config.me.listen_address.clone();
    let node = match Node::start(config, definitions()).await {
        Ok(node) => node,
        Err(e) => {
            eprintln!("radon-node: {e}");
            return ExitCode::FAILURE;
        }
    };
    match node.http_addr() {
        Some(http) => println!("radon-node {id} peers on {listen}, http on {http}"),
        None => println!("radon-node {id} peers on {listen}"),
    }
    let (Ok(mut term), Ok(mut int)) = (signal(SignalKind::terminate()), signal(SignalKind::interrupt())) else {
        eprintln!("radon-node: cannot install signal handlers");
        return ExitCode::FAILURE;
    };
    let code = tokio::select! {
        _ = term.recv() => ExitCode::SUCCESS,
        _ = int.recv() => ExitCode::SUCCESS,
        reason = node.halted() => match reason {
            HaltReason::Escalated(atom) => {
                eprintln!("radon-node: fault in {atom} escalated, stopping");
                ExitCode::FAILURE
            }
            HaltReason::Shutdown => ExitCode::SUCCESS,
        },
    };
    node.shutdown();
    code
}

#[tokio::main]
async fn main() -> ExitCode {
    init_logging();
    let cli = Cli::parse();
    match &cli.command {
        Some(Command::Store {
            action: StoreCommand::Dump { data_dir, json },
        }) => dump(data_dir, *json),
        None => {
            if cli.id.is_none() {
                Cli::command()
                    .error(clap::error::ErrorKind::MissingRequiredArgument, "--id is required")
                    .exit();
            }
            run(cli).await
        }
    }
}
