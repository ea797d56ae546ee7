//! Built-in experiment presets.
//!
//! Every preset runs the default corruption scenario on the default desk-scale
//! generator, so presets differ only in controller and init settings.

use crate::drift::TriggerConfig;
use crate::error::{Error, Result};
use crate::kvcache::CacheLayout;
use crate::simgen::{GeneratorConfig, InitPolicy};

use super::config::ExperimentConfig;

pub struct Preset {
    pub name: &'static str,
    pub description: &'static str,
    build: fn() -> ExperimentConfig,
}

impl Preset {
    pub fn config(&self) -> ExperimentConfig {
        ExperimentConfig {
            preset_name: Some(self.name.to_string()),
            ..(self.build)()
        }
    }
}

fn scenario() -> ExperimentConfig {
    ExperimentConfig {
        generator: GeneratorConfig::with_default_corruption(),
        ..ExperimentConfig::default()
    }
}

fn with_trigger(trigger: TriggerConfig) -> ExperimentConfig {
    ExperimentConfig {
        trigger,
        ..scenario()
    }
}

pub const PRESETS: &[Preset] = &[
    Preset {
        name: "baseline",
        description: "pruning disabled; drift is scored and logged only",
        build: || {
            with_trigger(TriggerConfig {
                enabled: false,
                ..TriggerConfig::default()
            })
        },
    },
    Preset {
        name: "tokentrim-default",
        description: "p = 0.1, lambda = 2.0, warm-up 2, one regeneration, stabilized init",
        build: scenario,
    },
    Preset {
        name: "tokentrim-5pct",
        description: "default controller pruning 5% of tokens",
        build: || {
            with_trigger(TriggerConfig {
                fraction: 0.05,
                ..TriggerConfig::default()
            })
        },
    },
    Preset {
        name: "tokentrim-20pct",
        description: "default controller pruning 20% of tokens",
        build: || {
            with_trigger(TriggerConfig {
                fraction: 0.2,
                ..TriggerConfig::default()
            })
        },
    },
    Preset {
        name: "tokentrim-no-stabilized-init",
        description: "default controller with a plain first chunk",
        build: || ExperimentConfig {
            init: InitPolicy::plain(),
            ..scenario()
        },
    },
    Preset {
        name: "tokentrim-anchor-recent",
        description: "default controller on an anchor + recent cache (anchor chunks never pruned)",
        build: || ExperimentConfig {
            layout: CacheLayout::anchor_recent_default(),
            ..scenario()
        },
    },
];

pub fn lookup(name: &str) -> Result<ExperimentConfig> {
    PRESETS
        .iter()
        .find(|p| p.name == name)
        .map(Preset::config)
        .ok_or_else(|| {
            let known: Vec<_> = PRESETS.iter().map(|p| p.name).collect();
            Error::config(
                "preset",
                format!("unknown preset `{name}` (known: {})", known.join(", ")),
            )
        })
}
