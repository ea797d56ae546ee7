use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::controller::StepOutcome;
use crate::error::{Error, Result};

use super::config::ExperimentConfig;
use super::RunRecord;

pub const SCHEMA_VERSION: &str = "1";
pub const STEPS_FILE: &str = "steps.csv";
pub const SUMMARY_FILE: &str = "summary.json";

/// One line of `steps.csv`. Field order is the column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub seed: u64,
    pub step: usize,
    pub severity_initial: f64,
    pub threshold: Option<f64>,
    pub triggered: bool,
    pub regen_count: usize,
    pub severity_final: f64,
    pub pruned_count: usize,
    pub alive_rows: usize,
}

impl StepRow {
    pub fn from_outcome(seed: u64, o: &StepOutcome) -> Self {
        Self {
            seed,
            step: o.step,
            severity_initial: o.severity_initial,
            threshold: o.threshold,
            triggered: o.triggered,
            regen_count: o.regen_count,
            severity_final: o.severity_final,
            pruned_count: o.pruned_indices.len(),
            alive_rows: o.alive_rows,
        }
    }
}

/// Per-run aggregates. Everything here is a function of the step rows alone,
/// summed front to back in step order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub steps: usize,
    pub trigger_count: usize,
    pub regen_total: usize,
    /// Fraction of steps that ran at least one regeneration.
    pub regeneration_rate: f64,
    pub mean_severity_initial: f64,
    pub mean_severity_final: f64,
    /// Sum of accepted severities over all steps.
    pub cumulative_drift_area: f64,
    pub total_pruned: usize,
    pub mean_alive_rows: f64,
}

impl Aggregates {
    pub fn from_rows(rows: &[StepRow]) -> Self {
        let n = rows.len();
        let mut trigger_count = 0;
        let mut regen_total = 0;
        let mut regenerated = 0;
        let mut sum_initial = 0.0;
        let mut sum_final = 0.0;
        let mut total_pruned = 0;
        let mut sum_rows = 0usize;
        for r in rows {
            trigger_count += r.triggered as usize;
            regen_total += r.regen_count;
            regenerated += (r.regen_count > 0) as usize;
            sum_initial += r.severity_initial;
            sum_final += r.severity_final;
            total_pruned += r.pruned_count;
            sum_rows += r.alive_rows;
        }
        let mean = |s: f64| if n == 0 { 0.0 } else { s / n as f64 };
        Self {
            steps: n,
            trigger_count,
            regen_total,
            regeneration_rate: mean(regenerated as f64),
            mean_severity_initial: mean(sum_initial),
            mean_severity_final: mean(sum_final),
            cumulative_drift_area: sum_final,
            total_pruned,
            mean_alive_rows: mean(sum_rows as f64),
        }
    }
}

/// Distance of a run's accepted summaries from the clean reference
/// trajectory of the same seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fidelity {
    /// Frobenius distance at the last step.
    pub final_distance: f64,
    /// Mean Frobenius distance over the first `EARLY_STEPS` steps.
    pub early_distance: f64,
}

pub const EARLY_STEPS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub aggregates: Aggregates,
    pub fidelity: Fidelity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema_version: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    /// Pooled over every row of every seed.
    pub aggregates: Aggregates,
    pub seeds: Vec<SeedSummary>,
}

impl RunSummary {
    pub fn from_records(config: &ExperimentConfig, records: &[RunRecord]) -> Self {
        let all: Vec<StepRow> = records
            .iter()
            .flat_map(|r| r.rows.iter().cloned())
            .collect();
        Self {
            schema_version: SCHEMA_VERSION.to_string(),
            config_hash: config.config_hash(),
            config: config.clone(),
            aggregates: Aggregates::from_rows(&all),
            seeds: records
                .iter()
                .map(|r| SeedSummary {
                    seed: r.seed,
                    aggregates: r.aggregates.clone(),
                    fidelity: r.fidelity,
                })
                .collect(),
        }
    }
}

/// Writes `steps.csv` and `summary.json` into `dir`, creating it if needed.
/// Wall-clock time is not written, so the files depend only on the config.
pub fn emit_metrics(
    config: &ExperimentConfig,
    records: &[RunRecord],
    dir: &Path,
) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let csv_path = dir.join(STEPS_FILE);
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| csv_error(&csv_path, e))?;
    for row in records.iter().flat_map(|r| r.rows.iter()) {
        w.serialize(row).map_err(|e| csv_error(&csv_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;

    let json_path = dir.join(SUMMARY_FILE);
    let summary = RunSummary::from_records(config, records);
    let mut text = serde_json::to_string_pretty(&summary).map_err(|e| Error::Format {
        path: json_path.clone(),
        msg: e.to_string(),
    })?;
    text.push('\n');
    fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;

    Ok((csv_path, json_path))
}

pub fn read_step_rows(path: &Path) -> Result<Vec<StepRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize()
        .map(|row| row.map_err(|e| csv_error(path, e)))
        .collect()
}

pub fn read_summary(path: &Path) -> Result<RunSummary> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let summary: RunSummary = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    if summary.schema_version != SCHEMA_VERSION {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                summary.schema_version
            ),
        });
    }
    Ok(summary)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        }
    }
}
