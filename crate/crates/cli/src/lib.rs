//! Shared plumbing for the `radon-*` binaries: the built-in definition set,
//! a launcher for node processes and the local demo.

pub mod demo;
pub mod process;

use std::path::PathBuf;

use radon_core::engine::AtomDefinition;

/// Every definition compiled into `radon-node`.
pub fn definitions() -> Vec<AtomDefinition> {
    let mut defs = radon_core::builtins::definitions();
    defs.extend(radon_kvstore::definitions());
    defs
}

/// Logs to stderr, filtered by `RUST_LOG` (default `warn`).
pub fn init_logging() {
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn"));
    let _ = tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .try_init();
}

/// Path of another binary installed next to the running one.
pub fn sibling_binary(name: &str) -> PathBuf {
    let exe = std::env::current_exe().unwrap_or_else(|_| PathBuf::from(name));
    match exe.parent() {
        Some(dir) => dir.join(name),
        None => PathBuf::from(name),
    }
}

/// Machine-readable summary of one run.
pub fn report_json(report: &radon_bench::RunReport) -> serde_json::Value {
    serde_json::json!({
        "label": report.label,
        "clients": report.clients,
        "rate": report.rate,
        "duration_secs": report.duration.as_secs_f64(),
        "sent": report.sent,
        "ok": report.ok,
        "not_found": report.not_found,
        "errors": report.errors,
        "timeouts": report.timeouts,
        "achieved": report.achieved(),
        "p50_us": report.p50_us(),
        "p90_us": report.p90_us(),
        "p99_us": report.p99_us(),
        "p999_us": report.p999_us(),
        "max_in_flight": report.max_in_flight,
    })
}
