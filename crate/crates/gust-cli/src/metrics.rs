//! JSONL metrics: one object per EM iteration plus one summary line per run.
//!
//! Files are rewritten from scratch on each run and contain nothing
//! non-deterministic, so identical runs produce byte-identical output.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use gust_core::trainer::EmHistory;
use gust_core::{Method, TrainConfig};

use crate::error::CliError;

/// Identity of one seeded run, echoed on every metrics line.
#[derive(Debug, Clone)]
pub struct RunMeta {
    pub run_id: String,
    pub seed: u64,
    pub dataset: String,
    pub method: Method,
    pub config: TrainConfig,
}

#[derive(Serialize)]
#[serde(untagged)]
enum Iteration {
    Step(usize),
    Summary(&'static str),
}

#[derive(Serialize)]
struct MetricsRow<'a> {
    run_id: &'a str,
    seed: u64,
    dataset: &'a str,
    method: &'a str,
    config: &'a TrainConfig,
    iteration: Iteration,
    loss_total: f64,
    loss_labeled: f64,
    loss_pseudo: f64,
    loss_smooth: f64,
    mean_alpha: f64,
    val_acc: Option<f64>,
    test_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    best_val_iteration: Option<usize>,
}

/// Writes the per-iteration rows and the trailing summary row. An empty
/// history produces an empty file.
pub fn write_metrics(history: &EmHistory, meta: &RunMeta, path: &Path) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(CliError::io(parent))?;
        }
    }
    let mut out = Vec::new();
    for record in &history.records {
        let row = MetricsRow {
            run_id: &meta.run_id,
            seed: meta.seed,
            dataset: &meta.dataset,
            method: meta.method.name(),
            config: &meta.config,
            iteration: Iteration::Step(record.iteration),
            loss_total: record.loss_total,
            loss_labeled: record.loss_labeled,
            loss_pseudo: record.loss_pseudo,
            loss_smooth: record.loss_smooth,
            mean_alpha: record.mean_alpha,
            val_acc: record.val_acc,
            test_acc: record.test_acc,
            best_val_iteration: None,
        };
        serde_json::to_writer(&mut out, &row)?;
        out.push(b'\n');
    }
    if let Some(last) = history.records.last() {
        // The summary carries the reported accuracies: validation at its best
        // iteration and the test accuracy of that same iteration (final
        // iteration when no validation mask exists). Losses are the final
        // iteration's; the full trace sits in the step rows above.
        let summary = MetricsRow {
            run_id: &meta.run_id,
            seed: meta.seed,
            dataset: &meta.dataset,
            method: meta.method.name(),
            config: &meta.config,
            iteration: Iteration::Summary("summary"),
            loss_total: last.loss_total,
            loss_labeled: last.loss_labeled,
            loss_pseudo: last.loss_pseudo,
            loss_smooth: last.loss_smooth,
            mean_alpha: last.mean_alpha,
            val_acc: history.best_val_acc().or(last.val_acc),
            test_acc: history.reported_test_acc(),
            best_val_iteration: history.best_val_iteration,
        };
        serde_json::to_writer(&mut out, &summary)?;
        out.push(b'\n');
    }
    let mut file = fs::File::create(path).map_err(CliError::io(path))?;
    file.write_all(&out).map_err(CliError::io(path))?;
    Ok(())
}

/// Summary fields read back from one metrics file.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub run_id: String,
    pub seed: u64,
    pub val_acc: Option<f64>,
    pub test_acc: Option<f64>,
}

/// Re-parses a metrics file and extracts its summary line. Reports are
/// always derived through this path so that printed aggregates match the raw
/// JSONL by construction.
pub fn read_summary(path: &Path) -> Result<RunSummary, CliError> {
    let text = fs::read_to_string(path).map_err(CliError::io(path))?;
    for line in text.lines() {
        let value: serde_json::Value = serde_json::from_str(line)?;
        if value.get("iteration").and_then(|v| v.as_str()) == Some("summary") {
            return Ok(RunSummary {
                run_id: value
                    .get("run_id")
                    .and_then(|v| v.as_str())
                    .unwrap_or_default()
                    .to_owned(),
                seed: value.get("seed").and_then(|v| v.as_u64()).unwrap_or_default(),
                val_acc: value.get("val_acc").and_then(|v| v.as_f64()),
                test_acc: value.get("test_acc").and_then(|v| v.as_f64()),
            });
        }
    }
    Err(CliError::Config(format!(
        "{}: no summary line found",
        path.display()
    )))
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_of_constant_series_is_zero_spread() {
        let (mean, std) = mean_std(&[0.8, 0.8, 0.8]);
        assert!((mean - 0.8).abs() < 1e-12);
        assert!(std.abs() < 1e-12);
    }

    #[test]
    fn mean_std_matches_hand_computation() {
        let (mean, std) = mean_std(&[1.0, 2.0, 3.0]);
        assert!((mean - 2.0).abs() < 1e-12);
        assert!((std - 1.0).abs() < 1e-12);
    }
}
