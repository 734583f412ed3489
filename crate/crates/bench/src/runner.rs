//! Closed-loop paced clients driving HTTP targets.

use std::collections::BTreeMap;
use std::time::Duration;

use hdrhistogram::Histogram;
use radon_core::client::HttpClient;
use tokio::time::Instant;

use crate::report::{new_histogram, RunReport};
use crate::workload::{client_seed, OpKind, SpecError, WorkloadSpec, WorkloadStream};

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error("no targets given")]
    NoTargets,
    #[error("target {target} unreachable: {reason}")]
    Unreachable { target: String, reason: String },
}

/// Counters gathered by one client.
struct ClientTally {
    histogram: Histogram<u64>,
    sent: u64,
    ok: u64,
    not_found: u64,
    errors: u64,
    timeouts: u64,
    per_op: BTreeMap<OpKind, u64>,
    max_in_flight: usize,
}

fn expected(kind: OpKind, status: u16) -> Option<bool> {
    match (kind, status) {
        (_, 200) => Some(false),
        (OpKind::GetRandom | OpKind::GetRecent, 404) => Some(true),
        _ => None,
    }
}

async fn run_client(
    spec: WorkloadSpec,
    targets: Vec<String>,
    seed: u64,
    start: Instant,
) -> ClientTally {
    let mut stream = WorkloadStream::new(&spec, seed);
    let target = targets[stream.pick(targets.len())].clone();
    let mut tally = ClientTally {
        histogram: new_histogram(),
        sent: 0,
        ok: 0,
        not_found: 0,
        errors: 0,
        timeouts: 0,
        per_op: BTreeMap::new(),
        max_in_flight: 0,
    };
    let interval = Duration::from_secs_f64(1.0 / spec.rate);
    let end = start + spec.duration();
    let timeout = spec.timeout();
    let mut client: Option<HttpClient> = None;
    let mut in_flight = 0usize;
    let mut n: u32 = 0;
    loop {
        let scheduled = start + interval * n;
        if scheduled >= end {
            break;
        }
        n += 1;
        tokio::time::sleep_until(scheduled).await;
        if Instant::now() >= end {
            break;
        }
        let op = stream.next_op();
        tally.sent += 1;
        *tally.per_op.entry(op.kind).or_default() += 1;
        if client.is_none() {
            client = HttpClient::connect(&target).await.ok();
        }
        let Some(conn) = client.as_mut() else {
            tally.errors += 1;
            continue;
        };
        in_flight += 1;
        tally.max_in_flight = tally.max_in_flight.max(in_flight);
        let began = std::time::Instant::now();
        let body = op.value.clone().unwrap_or_default();
        let outcome = tokio::time::timeout(timeout, conn.request(op.method(), &op.path(), body)).await;
        let elapsed = began.elapsed();
        in_flight -= 1;
        match outcome {
            Ok(Ok((status, _))) => match expected(op.kind, status) {
                Some(absent) => {
                    tally.ok += 1;
                    tally.not_found += u64::from(absent);
                    let micros = (elapsed.as_micros() as u64).max(1);
                    tally.histogram.saturating_record(micros);
                    if op.kind == OpKind::Put {
                        stream.confirm_put(op.key);
                    }
                }
                None => tally.errors += 1,
            },
            Ok(Err(_)) => {
                tally.errors += 1;
                client = None;
            }
            Err(_) => {
                tally.timeouts += 1;
                client = None;
            }
        }
    }
    tally
}

/// Runs `spec` against `targets`. Each client picks one target at random
/// and sends sequentially at its paced rate.
pub async fn run_workload(
    spec: &WorkloadSpec,
    targets: &[String],
    seed: u64,
    label: &str,
) -> Result<RunReport, BenchError> {
    spec.validate()?;
    if targets.is_empty() {
        return Err(BenchError::NoTargets);
    }
    for target in targets {
        HttpClient::connect(target)
            .await
            .map_err(|e| BenchError::Unreachable {
                target: target.clone(),
                reason: e.to_string(),
            })?;
    }
    let start = Instant::now() + Duration::from_millis(20);
    let handles: Vec<_> = (0..spec.clients)
        .map(|i| {
            tokio::spawn(run_client(
                spec.clone(),
                targets.to_vec(),
                client_seed(seed, i),
                start,
            ))
        })
        .collect();
    let mut report = RunReport::empty(label, spec.clients, spec.rate, spec.duration());
    let secs = spec.duration_secs;
    for handle in handles {
        let tally = handle.await.expect("client task");
        report.histogram.add(&tally.histogram).expect("same bounds");
        report.sent += tally.sent;
        report.ok += tally.ok;
        report.not_found += tally.not_found;
        report.errors += tally.errors;
        report.timeouts += tally.timeouts;
        for (kind, count) in tally.per_op {
            *report.per_op.entry(kind).or_default() += count;
        }
        report.max_in_flight = report.max_in_flight.max(tally.max_in_flight);
        report.max_client_rate = report.max_client_rate.max(tally.ok as f64 / secs);
    }
    Ok(report)
}

/// Replays one spec against a native echo server and a Radon echo
/// deployment, in that order.
pub async fn run_baselines(
    spec: &WorkloadSpec,
    seed: u64,
    echo_targets: &[String],
    radon_targets: &[String],
) -> Result<(RunReport, RunReport), BenchError> {
    let echo = run_workload(spec, echo_targets, seed, "echo").await?;
    let radon = run_workload(spec, radon_targets, seed, "radon-echo").await?;
    Ok((echo, radon))
}

/// Fetches `/_radon/stats` from a runtime node.
pub async fn server_stats(target: &str) -> Option<serde_json::Value> {
    let mut client = HttpClient::connect(target).await.ok()?;
    let (status, body) = client.get("/_radon/stats").await.ok()?;
    if status != 200 {
        return None;
    }
    serde_json::from_slice(&body).ok()
}
