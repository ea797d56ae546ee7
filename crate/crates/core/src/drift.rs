//! Running statistics over accepted drift severities and the adaptive trigger.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How [`RunningStats`] answers `mean()`/`std()`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum HistoryMode {
    /// Single-pass mean/sum-of-squared-deviations update; O(1) memory.
    #[default]
    Streaming,
    /// Keeps every accepted severity and recomputes the batch formulas on demand.
    ExactRecompute,
}

/// Mean and population standard deviation of the severities of every accepted
/// step so far.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    count: usize,
    mean: f64,
    m2: f64,
    mode: HistoryMode,
    history: Vec<f64>,
}

impl Default for RunningStats {
    fn default() -> Self {
        Self::new(HistoryMode::Streaming)
    }
}

impl RunningStats {
    pub fn new(mode: HistoryMode) -> Self {
        Self {
            count: 0,
            mean: 0.0,
            m2: 0.0,
            mode,
            history: Vec::new(),
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn mode(&self) -> HistoryMode {
        self.mode
    }

    /// Accepted severities in order; only populated in exact-recompute mode.
    pub fn history(&self) -> &[f64] {
        &self.history
    }

    pub fn m2(&self) -> f64 {
        self.m2
    }

    /// Zero for an empty history.
    pub fn mean(&self) -> f64 {
        match self.mode {
            HistoryMode::Streaming => self.mean,
            HistoryMode::ExactRecompute => batch_mean(&self.history),
        }
    }

    /// Population standard deviation; zero with fewer than two samples.
    pub fn std(&self) -> f64 {
        if self.count <= 1 {
            return 0.0;
        }
        match self.mode {
            HistoryMode::Streaming => (self.m2 / self.count as f64).sqrt(),
            HistoryMode::ExactRecompute => batch_std(&self.history),
        }
    }

    pub fn push(&mut self, severity: f64) -> Result<()> {
        if !severity.is_finite() || severity < 0.0 {
            return Err(Error::NonFinite(format!("accepted severity {severity}")));
        }
        self.count += 1;
        let delta = severity - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (severity - self.mean);
        if self.mode == HistoryMode::ExactRecompute {
            self.history.push(severity);
        }
        Ok(())
    }

    /// Value-style variant of [`push`](Self::push).
    pub fn accept(mut self, severity: f64) -> Result<Self> {
        self.push(severity)?;
        Ok(self)
    }
}

pub fn batch_mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn batch_std(xs: &[f64]) -> f64 {
    if xs.len() <= 1 {
        return 0.0;
    }
    let mu = batch_mean(xs);
    (xs.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / xs.len() as f64).sqrt()
}

pub const DEFAULT_FRACTION: f64 = 0.1;
pub const DEFAULT_LAMBDA: f64 = 2.0;
pub const DEFAULT_WARMUP: usize = 2;
pub const DEFAULT_MAX_REGEN: usize = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TriggerConfig {
    /// When false the controller scores every step but never prunes.
    pub enabled: bool,
    pub lambda: f64,
    pub warmup: usize,
    pub fraction: f64,
    pub max_regen: usize,
}

impl Default for TriggerConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            lambda: DEFAULT_LAMBDA,
            warmup: DEFAULT_WARMUP,
            fraction: DEFAULT_FRACTION,
            max_regen: DEFAULT_MAX_REGEN,
        }
    }
}

impl TriggerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(
                "trigger.lambda",
                format!("must be positive, got {}", self.lambda),
            ));
        }
        if !(self.fraction > 0.0 && self.fraction < 1.0) {
            return Err(Error::config(
                "trigger.fraction",
                format!("must lie in (0, 1), got {}", self.fraction),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TriggerDecision {
    pub fire: bool,
    /// `mu + lambda * sigma` at decision time.
    pub threshold: f64,
    pub in_warmup: bool,
}

/// Strict comparison `severity > mean + lambda * std`, suppressed for
/// `step <= warmup`.
pub fn should_trigger(
    stats: &RunningStats,
    severity: f64,
    step: usize,
    cfg: &TriggerConfig,
) -> TriggerDecision {
    let threshold = stats.mean() + cfg.lambda * stats.std();
    let in_warmup = step <= cfg.warmup;
    TriggerDecision {
        fire: !in_warmup && severity > threshold,
        threshold,
        in_warmup,
    }
}
