//! Experiment plumbing: configuration and presets, seeded runs, metrics files
//! and paired comparisons.

mod compare;
mod config;
mod metrics;
pub mod presets;

use std::path::Path;
use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::controller::{run_stream, StepOutcome, StreamRun};
use crate::drift::TriggerConfig;
use crate::error::Result;
use crate::latent::LatentSummary;
use crate::simgen::{GeneratorConfig, InitPolicy, SimGenerator};

pub use compare::{compare_runs, sign_test, Comparison, MetricComparison, METRICS};
pub use config::{ExperimentConfig, DEFAULT_SEED_COUNT, DEFAULT_STEPS};
pub use metrics::{
    emit_metrics, read_step_rows, read_summary, Aggregates, Fidelity, RunSummary, SeedSummary,
    StepRow, EARLY_STEPS, SCHEMA_VERSION, STEPS_FILE, SUMMARY_FILE,
};
pub use presets::{Preset, PRESETS};

/// Result of one seed of an experiment.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub seed: u64,
    pub config_hash: String,
    pub outcomes: Vec<StepOutcome>,
    pub rows: Vec<StepRow>,
    pub aggregates: Aggregates,
    pub fidelity: Fidelity,
    /// Not written to any file.
    pub wall_clock: Duration,
}

/// Runs the controlled stream for one seed.
pub fn run_seed(config: &ExperimentConfig, seed: u64) -> Result<StreamRun> {
    let generator = SimGenerator::new(GeneratorConfig {
        seed,
        ..config.generator.clone()
    })?;
    run_stream(
        generator,
        &config.trigger,
        config.layout,
        config.steps,
        &config.init,
    )
}

/// The clean reference trajectory for a seed: same generator and cache
/// layout, no corruption, no pruning, noise-free first chunk.
pub fn reference_run(config: &ExperimentConfig, seed: u64) -> Result<StreamRun> {
    let generator = SimGenerator::new(GeneratorConfig {
        seed,
        corruption: Vec::new(),
        ..config.generator.clone()
    })?;
    let trigger = TriggerConfig {
        enabled: false,
        ..config.trigger.clone()
    };
    run_stream(
        generator,
        &trigger,
        config.layout,
        config.steps,
        &InitPolicy::noise_free(),
    )
}

pub fn summary_distance(a: &LatentSummary, b: &LatentSummary) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.values().iter().zip(b.values().iter()) {
        acc += (x - y) * (x - y);
    }
    acc.sqrt()
}

pub fn fidelity(run: &[LatentSummary], reference: &[LatentSummary]) -> Fidelity {
    let early = run.len().min(EARLY_STEPS);
    let mut early_sum = 0.0;
    for (a, b) in run.iter().zip(reference).take(early) {
        early_sum += summary_distance(a, b);
    }
    Fidelity {
        final_distance: summary_distance(
            run.last().expect("at least one step"),
            reference.last().expect("at least one step"),
        ),
        early_distance: early_sum / early as f64,
    }
}

/// Runs every seed of `config` (in parallel) and returns one record per seed,
/// in the order the seeds are listed.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<RunRecord>> {
    config.validate()?;
    let hash = config.config_hash();
    config
        .seeds
        .par_iter()
        .map(|&seed| {
            let started = Instant::now();
            let run = run_seed(config, seed)?;
            let reference = reference_run(config, seed)?;
            let rows: Vec<StepRow> = run
                .outcomes
                .iter()
                .map(|o| StepRow::from_outcome(seed, o))
                .collect();
            let record = RunRecord {
                seed,
                config_hash: hash.clone(),
                aggregates: Aggregates::from_rows(&rows),
                fidelity: fidelity(&run.summaries, &reference.summaries),
                rows,
                outcomes: run.outcomes,
                wall_clock: started.elapsed(),
            };
            log::debug!("seed {seed} finished in {:?}", record.wall_clock);
            Ok(record)
        })
        .collect()
}

/// Runs `config` and writes its metrics into `dir`.
pub fn run_to_dir(config: &ExperimentConfig, dir: &Path) -> Result<Vec<RunRecord>> {
    let records = run_experiment(config)?;
    emit_metrics(config, &records, dir)?;
    Ok(records)
}

/// Loads the summary in a run directory written by [`emit_metrics`].
pub fn load_run_dir(dir: &Path) -> Result<RunSummary> {
    read_summary(&dir.join(SUMMARY_FILE))
}
