//! Configurations behind the checked-in golden files.

use tokentrim::harness::{presets, ExperimentConfig};

pub const DIR: &str = "tests/golden";
pub const PRESETS: [&str; 3] = ["baseline", "tokentrim-default", "tokentrim-20pct"];

pub fn config(name: &str) -> ExperimentConfig {
    ExperimentConfig {
        steps: 30,
        seeds: vec![0, 1, 2],
        ..presets::lookup(name).unwrap()
    }
}
