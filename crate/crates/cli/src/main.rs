use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tokentrim::harness::{self, presets, ExperimentConfig};
use tokentrim::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(
    name = "tokentrim",
    version,
    about = "Drift-triggered KV-cache pruning experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write steps.csv and summary.json
    Run {
        /// TOML config file; its values override the preset
        #[arg(long)]
        config: Option<PathBuf>,
        /// Built-in preset to start from
        #[arg(long)]
        preset: Option<String>,
        /// Run this single seed instead of the configured list
        #[arg(long)]
        seed: Option<u64>,
        /// Override the run length
        #[arg(long)]
        steps: Option<usize>,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Paired comparison of two run directories (B relative to A)
    Compare {
        a_dir: PathBuf,
        b_dir: PathBuf,
        /// Print the comparison as JSON
        #[arg(long)]
        json: bool,
    },
    /// Built-in presets
    Presets {
        #[command(subcommand)]
        action: PresetsAction,
    },
}

#[derive(Subcommand)]
enum PresetsAction {
    /// List preset names
    List,
    /// Print a preset's effective configuration as TOML
    Show { name: String },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() {
                EXIT_CONFIG
            } else {
                EXIT_RUNTIME
            })
        }
    }
}

fn dispatch(command: Command) -> Result<(), Error> {
    match command {
        Command::Run {
            config,
            preset,
            seed,
            steps,
            out,
        } => run(config, preset, seed, steps, out),
        Command::Compare { a_dir, b_dir, json } => {
            let a = harness::load_run_dir(&a_dir)?;
            let b = harness::load_run_dir(&b_dir)?;
            if a.config.steps != b.config.steps {
                return Err(Error::Config {
                    path: "steps".into(),
                    msg: format!("{} vs {} steps", a.config.steps, b.config.steps),
                });
            }
            let cmp = harness::compare_runs(&a.seeds, &b.seeds)?;
            if json {
                println!(
                    "{}",
                    serde_json::to_string_pretty(&cmp).expect("comparison serializes")
                );
            } else {
                println!("A: {} ({})", a_dir.display(), a.config_hash);
                println!("B: {} ({})", b_dir.display(), b.config_hash);
                println!("{cmp}");
            }
            Ok(())
        }
        Command::Presets { action } => {
            match action {
                PresetsAction::List => {
                    for p in presets::PRESETS {
                        println!("{:<30} {}", p.name, p.description);
                    }
                }
                PresetsAction::Show { name } => {
                    let cfg = presets::lookup(&name)?;
                    print!("{}", toml::to_string(&cfg).expect("config serializes"));
                }
            }
            Ok(())
        }
    }
}

fn run(
    config: Option<PathBuf>,
    preset: Option<String>,
    seed: Option<u64>,
    steps: Option<usize>,
    out: PathBuf,
) -> Result<(), Error> {
    let document = match &config {
        Some(path) => Some(fs::read_to_string(path).map_err(|e| Error::Config {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?),
        None => None,
    };
    let mut cfg = ExperimentConfig::resolve(preset.as_deref(), document.as_deref())?;
    if let Some(seed) = seed {
        cfg.seeds = vec![seed];
    }
    if let Some(steps) = steps {
        cfg.steps = steps;
    }
    cfg.validate()?;

    let records = harness::run_experiment(&cfg)?;
    let (csv, json) = harness::emit_metrics(&cfg, &records, &out)?;
    let summary = harness::RunSummary::from_records(&cfg, &records);
    let a = &summary.aggregates;
    println!(
        "config {} ({}), {} seed(s) x {} steps",
        summary.config_hash,
        cfg.preset_name.as_deref().unwrap_or("custom"),
        cfg.seeds.len(),
        cfg.steps
    );
    println!(
        "triggers {}  regeneration rate {:.4}  mean severity {:.6} -> {:.6}  mean alive rows {:.1}",
        a.trigger_count,
        a.regeneration_rate,
        a.mean_severity_initial,
        a.mean_severity_final,
        a.mean_alive_rows
    );
    let wall: std::time::Duration = records.iter().map(|r| r.wall_clock).sum();
    log::info!("total stream time {wall:?}");
    println!("wrote {} and {}", csv.display(), json.display());
    Ok(())
}
