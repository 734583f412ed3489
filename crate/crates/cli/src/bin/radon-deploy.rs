use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use radon_cli::init_logging;
use radon_core::model::parse_configuration;
use radon_core::transport::{deploy, ClusterFile};

/// Places every atom of a configuration document on the cluster.
#[derive(Parser)]
#[command(name = "radon-deploy", version)]
struct Cli {
    #[arg(long)]
    cluster: PathBuf,
    #[arg(long)]
    app: PathBuf,
    /// Print the placement report as JSON.
    #[arg(long)]
    json: bool,
}

#[tokio::main]
async fn main() -> ExitCode {
    init_logging();
    let cli = Cli::parse();
    let cluster = match ClusterFile::load(&cli.cluster) {
        Ok(cluster) => cluster,
        Err(e) => {
            eprintln!("radon-deploy: {e}");
            return ExitCode::FAILURE;
        }
    };
    let configs = match std::fs::read_to_string(&cli.app)
        .map_err(|e| e.to_string())
        .and_then(|text| parse_configuration(&text).map_err(|e| e.to_string()))
    {
        Ok(configs) => configs,
        Err(e) => {
            eprintln!("radon-deploy: {}: {e}", cli.app.display());
            return ExitCode::FAILURE;
        }
    };
    let report = deploy(&configs, &cluster.nodes).await;
    if cli.json {
        let rows: Vec<_> = report
            .iter()
            .map(|p| {
                serde_json::json!({
                    "definition": p.definition,
                    "node": p.node.as_ref().map(|n| n.to_string()),
                    "ok": p.ok,
                    "message": p.message,
                })
            })
            .collect();
        println!("{}", serde_json::Value::Array(rows));
    } else {
        for p in &report {
            let node = p.node.as_ref().map_or("-".to_string(), |n| n.to_string());
            let status = if p.ok { "ok" } else { "FAILED" };
            println!("{status:<6} {:<14} {node:<6} {}", p.definition, p.message);
        }
    }
    if report.iter().all(|p| p.ok) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
