use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::drift::TriggerConfig;
use crate::error::{Error, Result};
use crate::kvcache::CacheLayout;
use crate::latent::checked_selection_size;
use crate::simgen::{GeneratorConfig, InitPolicy};

use super::presets;

pub const DEFAULT_STEPS: usize = 50;
pub const DEFAULT_SEED_COUNT: u64 = 10;

/// One experiment: a controller configuration run over a list of seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, rename = "preset", skip_serializing_if = "Option::is_none")]
    pub preset_name: Option<String>,
    pub steps: usize,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub trigger: TriggerConfig,
    #[serde(default)]
    pub generator: GeneratorConfig,
    #[serde(default)]
    pub layout: CacheLayout,
    #[serde(default)]
    pub init: InitPolicy,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            preset_name: None,
            steps: DEFAULT_STEPS,
            seeds: (0..DEFAULT_SEED_COUNT).collect(),
            trigger: TriggerConfig::default(),
            generator: GeneratorConfig::default(),
            layout: CacheLayout::default(),
            init: InitPolicy::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("steps", "must be at least 1"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "must list at least one seed"));
        }
        self.trigger.validate()?;
        self.generator.validate()?;
        checked_selection_size(self.trigger.fraction, self.generator.n_tokens)?;
        self.layout.validate()?;
        self.init.validate()?;
        if self.trigger.warmup == 0 {
            log::warn!(
                "trigger.warmup = 0: the first gated step sees fewer than two accepted \
                 severities, so its threshold collapses to the running mean"
            );
        }
        Ok(())
    }

    /// Short hex digest of the canonical JSON form of this configuration.
    pub fn config_hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(&canonical)[..8])
    }

    /// Builds the effective configuration: start from `preset` (falling back
    /// to a `preset` key inside the document, then to the defaults) and
    /// overlay whatever the TOML document sets.
    pub fn resolve(preset: Option<&str>, document: Option<&str>) -> Result<Self> {
        let overlay: toml::Table = match document {
            Some(text) => text
                .parse()
                .map_err(|e: toml::de::Error| Error::config("<config>", e.to_string()))?,
            None => toml::Table::new(),
        };
        let file_preset = match overlay.get("preset") {
            Some(toml::Value::String(name)) => Some(name.clone()),
            Some(_) => return Err(Error::config("preset", "must be a string")),
            None => None,
        };
        let name = preset.map(str::to_string).or(file_preset);
        let base = match &name {
            Some(name) => presets::lookup(name)?,
            None => ExperimentConfig::default(),
        };

        let mut merged =
            toml::Table::try_from(&base).map_err(|e| Error::config("<preset>", e.to_string()))?;
        deep_merge(&mut merged, overlay);
        if let Some(name) = name {
            merged.insert("preset".into(), toml::Value::String(name));
        }
        let config: ExperimentConfig = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config("<config>", e.to_string()))?;
        config.validate()?;
        Ok(config)
    }
}

// Tables that carry their own `kind` tag name a whole variant, so they replace
// the base table instead of merging into it.
fn deep_merge(base: &mut toml::Table, overlay: toml::Table) {
    for (key, value) in overlay {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) if !o.contains_key("kind") => {
                deep_merge(b, o)
            }
            (_, value) => {
                base.insert(key, value);
            }
        }
    }
}
