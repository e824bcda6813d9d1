//! Experiment reports: per-seed records, summaries, JSON and CSV output.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use super::metrics::{summarize, Summary};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Ok,
    /// LiSSA blew up for this seed.
    Diverged,
    /// The metric is undefined or the method was not run (see `note`).
    Skipped,
}

impl Status {
    pub fn name(self) -> &'static str {
        match self {
            Status::Ok => "ok",
            Status::Diverged => "diverged",
            Status::Skipped => "skipped",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Record {
    pub seed: u64,
    pub rank: usize,
    pub method: String,
    pub metric: String,
    /// Epoch for trajectories, `None` for single values.
    pub step: Option<usize>,
    pub value: Option<f64>,
    pub status: Status,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl Record {
    pub fn ok(seed: u64, rank: usize, method: &str, metric: &str, value: f64) -> Self {
        Self {
            seed,
            rank,
            method: method.to_string(),
            metric: metric.to_string(),
            step: None,
            value: Some(value),
            status: Status::Ok,
            note: None,
        }
    }

    pub fn missing(
        seed: u64,
        rank: usize,
        method: &str,
        metric: &str,
        status: Status,
        note: impl Into<String>,
    ) -> Self {
        Self {
            seed,
            rank,
            method: method.to_string(),
            metric: metric.to_string(),
            step: None,
            value: None,
            status,
            note: Some(note.into()),
        }
    }

    pub fn at_step(mut self, step: usize) -> Self {
        self.step = Some(step);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub rank: usize,
    pub method: String,
    pub metric: String,
    pub step: Option<usize>,
    /// Seeds whose record was not `ok`.
    pub excluded: usize,
    pub summary: Option<Summary>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Timing {
    pub seed: u64,
    pub rank: usize,
    pub method: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub experiment: String,
    pub version: String,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub records: Vec<Record>,
    pub summaries: Vec<SummaryRow>,
    pub wall_time_seconds: Vec<Timing>,
}

impl ExperimentReport {
    pub fn new(
        experiment: &str,
        config: serde_json::Value,
        seeds: Vec<u64>,
        records: Vec<Record>,
        wall_time_seconds: Vec<Timing>,
    ) -> Self {
        let summaries = summarize_records(&records);
        Self {
            experiment: experiment.to_string(),
            version: VERSION.to_string(),
            config,
            seeds,
            records,
            summaries,
            wall_time_seconds,
        }
    }

    /// `ok` values of one (rank, method, metric, step) cell, in seed order.
    pub fn values(&self, rank: usize, method: &str, metric: &str, step: Option<usize>) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| {
                r.rank == rank
                    && r.method == method
                    && r.metric == metric
                    && r.step == step
                    && r.status == Status::Ok
            })
            .filter_map(|r| r.value)
            .collect()
    }

    pub fn summary(&self, rank: usize, method: &str, metric: &str, step: Option<usize>) -> Option<Summary> {
        self.summaries
            .iter()
            .find(|s| s.rank == rank && s.method == method && s.metric == metric && s.step == step)
            .and_then(|s| s.summary)
    }

    /// Total wall time of one method over all seeds.
    pub fn total_seconds(&self, rank: usize, method: &str) -> f64 {
        self.wall_time_seconds
            .iter()
            .filter(|t| t.rank == rank && t.method == method)
            .map(|t| t.seconds)
            .sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row per seed × method × metric (× step). Wall times are left out
    /// so that repeated runs produce identical bytes.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# datatk {} experiment {}", self.version, self.experiment);
        let _ = writeln!(out, "# config {}", self.config);
        out.push_str("seed,rank,method,metric,step,value,status\n");
        for r in &self.records {
            let step = r.step.map(|s| s.to_string()).unwrap_or_default();
            let value = r.value.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.seed,
                r.rank,
                r.method,
                r.metric,
                step,
                value,
                r.status.name()
            );
        }
        out
    }

    pub fn write(&self, json_path: &Path, csv_path: &Path) -> std::io::Result<()> {
        std::fs::write(json_path, self.to_json())?;
        std::fs::write(csv_path, self.to_csv())
    }
}

fn summarize_records(records: &[Record]) -> Vec<SummaryRow> {
    let mut keys: Vec<(usize, &str, &str, Option<usize>)> = Vec::new();
    for r in records {
        let key = (r.rank, r.method.as_str(), r.metric.as_str(), r.step);
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.into_iter()
        .map(|(rank, method, metric, step)| {
            let cell: Vec<&Record> = records
                .iter()
                .filter(|r| r.rank == rank && r.method == method && r.metric == metric && r.step == step)
                .collect();
            let values: Vec<f64> = cell
                .iter()
                .filter(|r| r.status == Status::Ok)
                .filter_map(|r| r.value)
                .collect();
            SummaryRow {
                rank,
                method: method.to_string(),
                metric: metric.to_string(),
                step,
                excluded: cell.len() - values.len(),
                summary: summarize(&values),
            }
        })
        .collect()
}
