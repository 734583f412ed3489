use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use radon_cli::demo::{demo_up, DemoOptions};
use radon_cli::{init_logging, sibling_binary};
use radon_core::storage::Durability;
use radon_kvstore::app::AppError;
use tokio::signal::unix::{signal, SignalKind};

#[derive(Parser)]
#[command(name = "radon", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Start a local KV cluster and keep it running until interrupted.
    DemoUp {
        #[arg(long, default_value_t = 3)]
        nodes: usize,
        #[arg(long, default_value_t = 8)]
        kvnodes_per_node: usize,
        #[arg(long, default_value_t = 2)]
        replication: usize,
        /// Working directory for cluster files, stores and logs.
        #[arg(long)]
        dir: Option<PathBuf>,
        #[arg(long, default_value = "async")]
        durability: Durability,
        #[arg(long)]
        json: bool,
    },
}

#[tokio::main]
async fn main() -> ExitCode {
    init_logging();
    let Command::DemoUp {
        nodes,
        kvnodes_per_node,
        replication,
        dir,
        durability,
        json,
    } = Cli::parse().command;
    let dir = dir.unwrap_or_else(|| std::env::temp_dir().join(format!("radon-demo-{}", std::process::id())));
    let options = DemoOptions {
        nodes,
        kvnodes_per_node,
        replication,
        durability,
    };
    let (Ok(mut term), Ok(mut int)) = (signal(SignalKind::terminate()), signal(SignalKind::interrupt())) else {
        eprintln!("radon: cannot install signal handlers");
        return ExitCode::FAILURE;
    };
    let mut demo = match demo_up(&sibling_binary("radon-node"), &dir, &options).await {
        Ok(demo) => demo,
        Err(e) => {
            eprintln!("radon: {e:#}");
            return if e.downcast_ref::<AppError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            };
        }
    };
    let nodes: Vec<_> = demo
        .cluster
        .nodes
        .iter()
        .map(|n| serde_json::json!({"id": n.info.node_id.to_string(), "http": n.http(), "log": n.log}))
        .collect();
    if json {
        println!(
            "{}",
            serde_json::json!({"dir": dir, "nodes": nodes, "members": demo.members.len(), "replication": replication})
        );
    } else {
        println!("demo cluster up in {}", dir.display());
        for node in &demo.cluster.nodes {
            println!("  {} http://{}", node.info.node_id, node.http());
        }
        println!("{} storage instances, replication {replication}", demo.members.len());
    }
    tokio::select! {
        _ = term.recv() => {}
        _ = int.recv() => {}
    }
    demo.cluster.shutdown().await;
    ExitCode::SUCCESS
}
