use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use radon_bench::echo::{radon_echo_application, EchoServer};
use radon_bench::{render_csv, render_table, run_workload, RunReport, WorkloadSpec};
use radon_cli::process::{EchoProcess, ProcessCluster, ECHO_READY_PREFIX};
use radon_cli::{init_logging, report_json, sibling_binary};
use radon_core::storage::Durability;

/// Paced HTTP load generator for Radon deployments and baselines.
#[derive(Parser)]
#[command(name = "radon-bench", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Workload spec as JSON; missing fields take their defaults.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    clients: Option<usize>,
    /// Per-client target rate in requests per second.
    #[arg(long)]
    rate: Option<f64>,
    #[arg(long)]
    duration_secs: Option<f64>,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Write the result as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Echo,
    RadonEcho,
}

#[derive(Subcommand)]
enum Command {
    /// Drive existing targets.
    Run {
        #[command(flatten)]
        common: Common,
        /// Comma separated `host:port` or `http://host:port` targets.
        #[arg(long, value_delimiter = ',', required = true)]
        targets: Vec<String>,
        #[arg(long, default_value = "run")]
        label: String,
    },
    /// Start a baseline server locally and drive it.
    Baseline {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        mode: Mode,
        /// Node processes for the radon-echo baseline.
        #[arg(long, default_value_t = 3)]
        nodes: usize,
    },
    /// Serve the native echo baseline until killed.
    EchoServer {
        #[arg(long, default_value = "127.0.0.1:0")]
        listen: String,
    },
}

fn load_spec(common: &Common) -> anyhow::Result<WorkloadSpec> {
    let mut spec = match &common.spec {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("invalid spec {}", path.display()))?
        }
        None => WorkloadSpec::default(),
    };
    if let Some(clients) = common.clients {
        spec.clients = clients;
    }
    if let Some(rate) = common.rate {
        spec.rate = rate;
    }
    if let Some(secs) = common.duration_secs {
        spec.duration_secs = secs;
    }
    spec.validate()?;
    Ok(spec)
}

fn emit(common: &Common, report: &RunReport) -> anyhow::Result<()> {
    if let Some(out) = &common.out {
        std::fs::write(out, render_csv(std::slice::from_ref(report)))
            .with_context(|| format!("cannot write {}", out.display()))?;
    }
    if common.json {
        println!("{}", report_json(report));
    } else {
        print!("{}", render_table(std::slice::from_ref(report)));
    }
    Ok(())
}

async fn baseline(common: &Common, mode: Mode, nodes: usize) -> anyhow::Result<RunReport> {
    let spec = load_spec(common)?;
    match mode {
        Mode::Echo => {
            let server = EchoProcess::spawn(&std::env::current_exe()?).await?;
            let report = run_workload(&spec, std::slice::from_ref(&server.addr), common.seed, "echo").await;
            server.stop().await;
            Ok(report?)
        }
        Mode::RadonEcho => {
            let dir = std::env::temp_dir().join(format!("radon-bench-{}", std::process::id()));
            let result = async {
                let mut cluster =
                    ProcessCluster::launch(&sibling_binary("radon-node"), &dir, nodes, Durability::Async).await?;
                let placed = cluster.deploy(&radon_echo_application()).await;
                let report = match placed.iter().find(|p| !p.ok) {
                    Some(p) => Err(anyhow::anyhow!("deploy failed: {}", p.message)),
                    None => Ok(run_workload(&spec, &cluster.http_addrs(), common.seed, "radon-echo").await?),
                };
                cluster.shutdown().await;
                report
            }
            .await;
            let _ = std::fs::remove_dir_all(&dir);
            result
        }
    }
}

async fn echo_server(listen: &str) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(listen).await?;
    let server = EchoServer::start(listener)?;
    println!("{ECHO_READY_PREFIX}{}", server.local_addr());
    tokio::signal::ctrl_c().await?;
    server.shutdown();
    Ok(())
}

fn fail(e: anyhow::Error) -> ExitCode {
    eprintln!("radon-bench: {e:#}");
    ExitCode::FAILURE
}

#[tokio::main]
async fn main() -> ExitCode {
    init_logging();
    let outcome = match Cli::parse().command {
        Command::Run { common, targets, label } => async {
            let spec = load_spec(&common)?;
            let report = run_workload(&spec, &targets, common.seed, &label).await?;
            emit(&common, &report)
        }
        .await,
        Command::Baseline { common, mode, nodes } => match baseline(&common, mode, nodes).await {
            Ok(report) => emit(&common, &report),
            Err(e) => Err(e),
        },
        Command::EchoServer { listen } => echo_server(&listen).await,
    };
    outcome.map_or_else(fail, |()| ExitCode::SUCCESS)
}
