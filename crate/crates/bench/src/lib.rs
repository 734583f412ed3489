//! Load generation, baselines and reporting for Radon deployments.

pub mod echo;
pub mod report;
pub mod runner;
pub mod workload;

pub use report::{parse_csv, render_csv, render_table, CsvRow, RunReport};
pub use runner::{run_baselines, run_workload, server_stats, BenchError};
pub use workload::{Mix, Op, OpKind, WorkloadSpec, WorkloadStream};
