//! Run results and their CSV / text renderings.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Duration;

use hdrhistogram::Histogram;
use serde::{Deserialize, Serialize};

use crate::workload::OpKind;

/// Latencies are recorded in microseconds between 1 µs and 60 s with two
/// significant digits, so any recorded value is off by at most 1%.
pub fn new_histogram() -> Histogram<u64> {
    Histogram::new_with_bounds(1, 60_000_000, 2).expect("valid histogram bounds")
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub label: String,
    pub clients: usize,
    pub rate: f64,
    pub duration: Duration,
    pub sent: u64,
    /// Requests answered as expected, including reads of absent keys.
    pub ok: u64,
    /// Subset of `ok` answered with 404.
    pub not_found: u64,
    pub errors: u64,
    pub timeouts: u64,
    pub per_op: BTreeMap<OpKind, u64>,
    pub histogram: Histogram<u64>,
    /// Largest number of requests a single client had outstanding.
    pub max_in_flight: usize,
    /// Fastest per-client completion rate, requests per second.
    pub max_client_rate: f64,
}

impl RunReport {
    pub fn empty(label: &str, clients: usize, rate: f64, duration: Duration) -> Self {
        Self {
            label: label.to_string(),
            clients,
            rate,
            duration,
            sent: 0,
            ok: 0,
            not_found: 0,
            errors: 0,
            timeouts: 0,
            per_op: BTreeMap::new(),
            histogram: new_histogram(),
            max_in_flight: 0,
            max_client_rate: 0.0,
        }
    }

    /// Successful operations per second over the run.
    pub fn achieved(&self) -> f64 {
        let secs = self.duration.as_secs_f64();
        if secs == 0.0 {
            0.0
        } else {
            self.ok as f64 / secs
        }
    }

    pub fn failed(&self) -> u64 {
        self.errors + self.timeouts
    }

    pub fn reconciles(&self) -> bool {
        self.sent == self.ok + self.errors + self.timeouts
            && self.sent == self.per_op.values().sum::<u64>()
    }

    /// Latency quantile in microseconds, 0 for an empty run.
    pub fn quantile_us(&self, q: f64) -> u64 {
        if self.histogram.is_empty() {
            0
        } else {
            self.histogram.value_at_quantile(q)
        }
    }

    pub fn p50_us(&self) -> u64 {
        self.quantile_us(0.50)
    }

    pub fn p90_us(&self) -> u64 {
        self.quantile_us(0.90)
    }

    pub fn p99_us(&self) -> u64 {
        self.quantile_us(0.99)
    }

    pub fn p999_us(&self) -> u64 {
        self.quantile_us(0.999)
    }

    pub fn row(&self) -> CsvRow {
        CsvRow {
            label: self.label.clone(),
            clients: self.clients,
            rate: self.rate,
            achieved: (self.achieved() * 10.0).round() / 10.0,
            p50_us: self.p50_us(),
            p90_us: self.p90_us(),
            p99_us: self.p99_us(),
            err: self.failed(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub label: String,
    pub clients: usize,
    pub rate: f64,
    pub achieved: f64,
    pub p50_us: u64,
    pub p90_us: u64,
    pub p99_us: u64,
    pub err: u64,
}

fn sorted(reports: &[RunReport]) -> Vec<&RunReport> {
    let mut out: Vec<&RunReport> = reports.iter().collect();
    out.sort_by(|a, b| a.label.cmp(&b.label));
    out
}

/// Header plus one row per report, ordered by label.
pub fn render_csv(reports: &[RunReport]) -> String {
    let mut writer = csv::Writer::from_writer(Vec::new());
    for report in sorted(reports) {
        writer.serialize(report.row()).expect("in-memory write");
    }
    if reports.is_empty() {
        writer
            .write_record(["label", "clients", "rate", "achieved", "p50_us", "p90_us", "p99_us", "err"])
            .expect("in-memory write");
    }
    String::from_utf8(writer.into_inner().expect("flushed")).expect("utf-8")
}

pub fn parse_csv(text: &str) -> Result<Vec<CsvRow>, csv::Error> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .collect()
}

pub fn render_table(reports: &[RunReport]) -> String {
    let mut out = format!(
        "{:<14} {:>7} {:>9} {:>11} {:>9} {:>9} {:>9} {:>9} {:>8}\n",
        "label", "clients", "rate", "achieved", "p50_us", "p90_us", "p99_us", "p999_us", "err"
    );
    for r in sorted(reports) {
        let _ = writeln!(
            out,
            "{:<14} {:>7} {:>9.0} {:>11.1} {:>9} {:>9} {:>9} {:>9} {:>8}",
            r.label,
            r.clients,
            r.rate,
            r.achieved(),
            r.p50_us(),
            r.p90_us(),
            r.p99_us(),
            r.p999_us(),
            r.failed()
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(label: &str, latencies: &[u64]) -> RunReport {
        let mut r = RunReport::empty(label, 2, 100.0, Duration::from_secs(2));
        for &l in latencies {
            r.histogram.record(l).unwrap();
            r.sent += 1;
            r.ok += 1;
            *r.per_op.entry(OpKind::GetRandom).or_default() += 1;
        }
        r
    }

    #[test]
    fn one_report_one_row() {
        let csv = render_csv(&[report("echo", &[100, 200, 250])]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "label,clients,rate,achieved,p50_us,p90_us,p99_us,err");
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[1], "echo,2,100.0,1.5,200,250,250,0");
    }

    #[test]
    fn csv_round_trips_and_sorts() {
        let reports = vec![
            report("radon-echo", &[50, 60]),
            report("echo", &[10]),
            report("kv", &[500, 900, 1000]),
        ];
        let rows = parse_csv(&render_csv(&reports)).unwrap();
        let labels: Vec<&str> = rows.iter().map(|r| r.label.as_str()).collect();
        assert_eq!(labels, vec!["echo", "kv", "radon-echo"]);
        let kv = &reports[2];
        assert_eq!(rows[1], kv.row());
        assert_eq!(rows[1].p50_us, kv.p50_us());
    }

    #[test]
    fn reconciliation() {
        let mut r = report("x", &[1, 2]);
        assert!(r.reconciles());
        r.errors += 1;
        assert!(!r.reconciles());
        r.sent += 1;
        *r.per_op.entry(OpKind::Put).or_default() += 1;
        assert!(r.reconciles());
    }

    #[test]
    fn histogram_error_is_bounded() {
        let mut h = new_histogram();
        for v in [1u64, 999, 12_345, 1_000_000, 59_000_000] {
            h.record(v).unwrap();
            let seen = h.value_at_quantile(1.0);
            assert!((seen as f64 - v as f64).abs() <= v as f64 * 0.01 + 1.0);
            h.reset();
        }
    }

    #[test]
    fn empty_csv_has_header() {
        assert_eq!(render_csv(&[]).trim(), "label,clients,rate,achieved,p50_us,p90_us,p99_us,err");
        assert!(render_table(&[report("a", &[5])]).contains("a "));
    }
}
