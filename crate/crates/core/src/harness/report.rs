use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{error_rate, time_rmse, AuditSummary, Scheme, StreamConfig};
use crate::error::{Result, TppError};

/// One next-event prediction next to the event it predicts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub task: usize,
    pub seq_id: String,
    /// Position of the target event in its sequence.
    pub index: usize,
    pub true_type: usize,
    pub true_time: f64,
    pub type_hat: usize,
    pub time_hat: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task: usize,
    pub window: (f64, f64),
    pub train_events: usize,
    pub epochs_trained: usize,
    pub targets: usize,
    /// `None` when the task has no test targets.
    pub error_rate: Option<f64>,
    pub time_rmse: Option<f64>,
}

/// Metrics of the records belonging to `task`.
pub fn metrics_from_predictions(records: &[PredictionRecord], task: usize) -> TaskMetrics {
    let recs: Vec<&PredictionRecord> = records.iter().filter(|r| r.task == task).collect();
    let types: (Vec<usize>, Vec<usize>) = recs.iter().map(|r| (r.type_hat, r.true_type)).unzip();
    let times: (Vec<f64>, Vec<f64>) = recs.iter().map(|r| (r.time_hat, r.true_time)).unzip();
    TaskMetrics {
        task,
        targets: recs.len(),
        error_rate: error_rate(&types.0, &types.1).ok(),
        time_rmse: time_rmse(&times.0, &times.1).ok(),
        ..Default::default()
    }
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Upper-triangular metric drops; rows are the evaluated task, columns the
/// checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgettingReport {
    pub error_rate: Vec<Vec<Option<f64>>>,
    pub time_rmse: Vec<Vec<Option<f64>>>,
    /// Mean over the strictly upper entries.
    pub mean_error_rate_drop: Option<f64>,
    pub mean_time_rmse_drop: Option<f64>,
}

impl ForgettingReport {
    pub fn new(error_rate: Vec<Vec<Option<f64>>>, time_rmse: Vec<Vec<Option<f64>>>) -> Self {
        let upper = |m: &Vec<Vec<Option<f64>>>| {
            mean(m.iter().enumerate().flat_map(|(i, row)| row.iter().skip(i + 1).copied().collect::<Vec<_>>()))
        };
        ForgettingReport {
            mean_error_rate_drop: upper(&error_rate),
            mean_time_rmse_drop: upper(&time_rmse),
            error_rate,
            time_rmse,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamReport {
    pub scheme: Scheme,
    pub seed: u64,
    pub config_hash: String,
    pub config: StreamConfig,
    pub tasks: Vec<TaskMetrics>,
    /// Uniform means over tasks that have targets.
    pub avg_error_rate: Option<f64>,
    pub avg_time_rmse: Option<f64>,
    pub forgetting: Option<ForgettingReport>,
    pub audit: AuditSummary,
}

impl StreamReport {
    pub fn new(
        scheme: Scheme,
        config: &StreamConfig,
        tasks: Vec<TaskMetrics>,
        forgetting: Option<ForgettingReport>,
        audit: AuditSummary,
    ) -> Self {
        StreamReport {
            scheme,
            seed: config.seed,
            config_hash: config.hash(),
            config: config.clone(),
            avg_error_rate: mean(tasks.iter().map(|t| t.error_rate)),
            avg_time_rmse: mean(tasks.iter().map(|t| t.time_rmse)),
            tasks,
            forgetting,
            audit,
        }
    }

    /// Long-format table: one row per task and metric, then one averages row
    /// per metric. Missing values are left empty.
    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut s = String::from("scheme,task,metric,value\n");
        for t in &self.tasks {
            s += &format!("{},{},error_rate,{}\n", self.scheme, t.task, fmt(t.error_rate));
            s += &format!("{},{},time_rmse,{}\n", self.scheme, t.task, fmt(t.time_rmse));
        }
        s += &format!("{},mean,error_rate,{}\n", self.scheme, fmt(self.avg_error_rate));
        s += &format!("{},mean,time_rmse,{}\n", self.scheme, fmt(self.avg_time_rmse));
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Writes `<scheme>.csv` and `<scheme>.json` into `dir`.
pub fn emit_report(report: &StreamReport, dir: impl AsRef<Path>) -> Result<(PathBuf, PathBuf)> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let csv = dir.join(format!("{}.csv", report.scheme));
    let json = dir.join(format!("{}.json", report.scheme));
    fs::write(&csv, report.to_csv())?;
    fs::write(&json, report.to_json())?;
    Ok((csv, json))
}

pub fn write_predictions(records: &[PredictionRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in records {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_predictions(path: impl AsRef<Path>) -> Result<Vec<PredictionRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize()
        .enumerate()
        .map(|(i, rec)| rec.map_err(|e| TppError::Parse { line: i + 2, msg: e.to_string() }))
        .collect()
}

fn csv_err(e: csv::Error) -> TppError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => TppError::Io(io),
        other => TppError::Parse { line: 0, msg: format!("{other:?}") },
    }
}
