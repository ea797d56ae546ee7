//! One TokenTrim step and the multi-step driver around it.
//!
//! Per step: generate a candidate chunk against the current cache, summarize
//! it, score per-token drift against the previous accepted summary and gate on
//! the adaptive threshold. On a trigger, the top-drift spatial positions are
//! pruned from the cache and the chunk is regenerated under the pruned
//! context. The accepted chunk's KV is then appended and its severity enters
//! the running statistics.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::drift::{should_trigger, RunningStats, TriggerConfig};
use crate::error::{Error, Result};
use crate::kvcache::{CacheLayout, KVCache, PruneMask};
use crate::latent::{
    checked_selection_size, drift_profile, summarize_chunk, FrameLatent, LatentSummary,
    TokenGridShape,
};
use crate::simgen::InitPolicy;

/// Output of one generator call.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedBatch {
    pub frames: Vec<FrameLatent>,
    pub keys: Array2<f64>,
    pub values: Array2<f64>,
}

/// First chunk of a stream plus the reference latent it is scored against.
#[derive(Debug, Clone, PartialEq)]
pub struct InitChunk {
    /// Noise-free anchor latent that the first chunk's drift is measured from.
    pub anchor: LatentSummary,
    pub batch: GeneratedBatch,
}

/// The generative model seen by the controller.
///
/// Implementations must be deterministic: the same seed, step and cache
/// contents give the same batch.
pub trait GeneratorPort {
    fn shape(&self) -> TokenGridShape;

    fn head_dim(&self) -> usize;

    fn init_chunk(&mut self, policy: &InitPolicy) -> Result<InitChunk>;

    /// Generates the chunk for `step`, conditioned on the previous accepted
    /// summary and on whatever `cache` still holds.
    fn generate_batch(
        &mut self,
        prev: &LatentSummary,
        cache: &KVCache,
        step: usize,
    ) -> Result<GeneratedBatch>;
}

impl<G: GeneratorPort + ?Sized> GeneratorPort for &mut G {
    fn shape(&self) -> TokenGridShape {
        (**self).shape()
    }

    fn head_dim(&self) -> usize {
        (**self).head_dim()
    }

    fn init_chunk(&mut self, policy: &InitPolicy) -> Result<InitChunk> {
        (**self).init_chunk(policy)
    }

    fn generate_batch(
        &mut self,
        prev: &LatentSummary,
        cache: &KVCache,
        step: usize,
    ) -> Result<GeneratedBatch> {
        (**self).generate_batch(prev, cache, step)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AcceptedVia {
    Warmup,
    UnderThreshold,
    Regenerated,
    RegenExhausted,
}

impl AcceptedVia {
    pub fn as_str(self) -> &'static str {
        match self {
            AcceptedVia::Warmup => "warmup",
            AcceptedVia::UnderThreshold => "under-threshold",
            AcceptedVia::Regenerated => "regenerated",
            AcceptedVia::RegenExhausted => "regen-exhausted",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub step: usize,
    pub severity_initial: f64,
    /// `None` while in warm-up.
    pub threshold: Option<f64>,
    pub triggered: bool,
    /// Union of every spatial index pruned at this step, in pruning order.
    pub pruned_indices: Vec<usize>,
    pub severity_final: f64,
    pub regen_count: usize,
    pub accepted_via: AcceptedVia,
    /// Alive cached rows after the accepted chunk was appended.
    pub alive_rows: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub frames: Vec<FrameLatent>,
    pub summary: LatentSummary,
    pub outcome: StepOutcome,
}

/// Runs one controller step for `step >= 2`, updating `cache` and `stats`
/// in place.
pub fn tokentrim_step<G: GeneratorPort>(
    prev: &LatentSummary,
    gen: &mut G,
    cache: &mut KVCache,
    stats: &mut RunningStats,
    cfg: &TriggerConfig,
    step: usize,
) -> Result<StepResult> {
    if step < 2 {
        return Err(Error::config("step", "controller steps start at 2"));
    }
    if prev.shape().n_tokens != cache.n_tokens() {
        return Err(Error::shape(format!(
            "previous summary has {} tokens, cache has {}",
            prev.shape().n_tokens,
            cache.n_tokens()
        )));
    }
    let n = cache.n_tokens();
    checked_selection_size(cfg.fraction, n)?;

    let candidate = gen.generate_batch(prev, cache, step)?;
    let summary = summarize_chunk(&candidate.frames, step)?;
    let profile = drift_profile(&summary, prev, cfg.fraction)?;
    let decision = should_trigger(stats, profile.severity, step, cfg);

    let mut accepted = (candidate, summary, profile.severity);
    let mut pruned = Vec::new();
    let mut regen_count = 0;
    let triggered = cfg.enabled && decision.fire;
    let accepted_via = if decision.in_warmup {
        AcceptedVia::Warmup
    } else if !triggered {
        AcceptedVia::UnderThreshold
    } else {
        let mut unstable = profile.selected;
        let mut via = AcceptedVia::RegenExhausted;
        loop {
            let mask = PruneMask::dropping(n, &unstable)?;
            cache.apply_prune(&mask)?;
            for &i in &unstable {
                if !pruned.contains(&i) {
                    pruned.push(i);
                }
            }
            if regen_count == cfg.max_regen {
                break;
            }
            regen_count += 1;
            let batch = gen.generate_batch(prev, cache, step)?;
            let summary = summarize_chunk(&batch.frames, step)?;
            let retry = drift_profile(&summary, prev, cfg.fraction)?;
            let severity = retry.severity;
            accepted = (batch, summary, severity);
            if severity <= decision.threshold {
                via = AcceptedVia::Regenerated;
                break;
            }
            // A failed retry narrows the context further before the next one.
            unstable = retry.selected;
            if regen_count == cfg.max_regen {
                break;
            }
        }
        via
    };

    let (batch, summary, severity_final) = accepted;
    stats.push(severity_final)?;
    cache.append_chunk(batch.keys, batch.values, step)?;

    Ok(StepResult {
        frames: batch.frames,
        summary,
        outcome: StepOutcome {
            step,
            severity_initial: profile.severity,
            threshold: (!decision.in_warmup).then_some(decision.threshold),
            triggered,
            pruned_indices: pruned,
            severity_final,
            regen_count,
            accepted_via,
            alive_rows: cache.alive_rows(),
        },
    })
}

/// Everything a finished stream leaves behind.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamRun {
    pub outcomes: Vec<StepOutcome>,
    /// Accepted summary per step, index 0 = step 1.
    pub summaries: Vec<LatentSummary>,
    pub final_frames: Vec<FrameLatent>,
    pub cache: KVCache,
    pub stats: RunningStats,
}

/// Drives `steps` chunks: step 1 comes from the init policy and is appended
/// without gating, later steps go through [`tokentrim_step`].
pub fn run_stream<G: GeneratorPort>(
    mut gen: G,
    cfg: &TriggerConfig,
    layout: CacheLayout,
    steps: usize,
    init: &InitPolicy,
) -> Result<StreamRun> {
    run_stream_with_stats(&mut gen, cfg, layout, steps, init, RunningStats::default())
}

pub fn run_stream_with_stats<G: GeneratorPort>(
    gen: &mut G,
    cfg: &TriggerConfig,
    layout: CacheLayout,
    steps: usize,
    init: &InitPolicy,
    mut stats: RunningStats,
) -> Result<StreamRun> {
    if steps == 0 {
        return Err(Error::config("steps", "must be at least 1"));
    }
    cfg.validate()?;
    let shape = gen.shape();
    let mut cache = KVCache::new(layout, shape.n_tokens, gen.head_dim())?;

    let InitChunk { anchor, batch } = gen.init_chunk(init)?;
    let first = summarize_chunk(&batch.frames, 1)?;
    let severity = drift_profile(&first, &anchor, cfg.fraction)?.severity;
    stats.push(severity)?;
    cache.append_chunk(batch.keys, batch.values, 1)?;

    let mut outcomes = Vec::with_capacity(steps);
    outcomes.push(StepOutcome {
        step: 1,
        severity_initial: severity,
        threshold: None,
        triggered: false,
        pruned_indices: Vec::new(),
        severity_final: severity,
        regen_count: 0,
        accepted_via: AcceptedVia::Warmup,
        alive_rows: cache.alive_rows(),
    });
    let mut summaries = Vec::with_capacity(steps);
    summaries.push(first);
    let mut final_frames = batch.frames;

    for step in 2..=steps {
        let prev = summaries.last().expect("step 1 summary present");
        let result = tokentrim_step(prev, gen, &mut cache, &mut stats, cfg, step)?;
        outcomes.push(result.outcome);
        summaries.push(result.summary);
        final_frames = result.frames;
    }

    Ok(StreamRun {
        outcomes,
        summaries,
        final_frames,
        cache,
        stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drift::HistoryMode;
    use crate::simgen::{GeneratorConfig, ScriptedGenerator, SimGenerator};

    fn spike_script() -> ScriptedGenerator {
        ScriptedGenerator::spike_scenario()
    }

    #[test]
    fn zero_drift_candidate_is_accepted() {
        let cfg = GeneratorConfig {
            context_mix: 0.0,
            base_noise: 0.0,
            ..GeneratorConfig::default()
        };
        let run = run_stream(
            SimGenerator::new(cfg).unwrap(),
            &TriggerConfig::default(),
            CacheLayout::default(),
            6,
            &InitPolicy::stabilized(),
        )
        .unwrap();
        for o in &run.outcomes[3..] {
            assert_eq!(o.severity_initial, 0.0);
            assert_eq!(o.accepted_via, AcceptedVia::UnderThreshold);
            assert_eq!(o.regen_count, 0);
            assert!(o.pruned_indices.is_empty());
        }
    }

    #[test]
    fn spike_triggers_single_regeneration() {
        let mut gen = spike_script();
        let run = run_stream(
            &mut gen,
            &TriggerConfig::default(),
            CacheLayout::default(),
            4,
            &InitPolicy::stabilized(),
        )
        .unwrap();
        let o = &run.outcomes[2];
        assert_eq!(o.severity_initial, 9.0);
        assert_eq!(o.threshold, Some(1.0));
        assert!(o.triggered);
        assert_eq!(o.pruned_indices, vec![5]);
        assert_eq!(o.regen_count, 1);
        assert_eq!(o.accepted_via, AcceptedVia::Regenerated);
        assert_eq!(o.severity_final, 1.0);
        assert_eq!(gen.calls_for(3), 2);
    }

    #[test]
    fn zero_budget_still_prunes() {
        let mut gen = spike_script();
        let cfg = TriggerConfig {
            max_regen: 0,
            ..TriggerConfig::default()
        };
        let run = run_stream(
            &mut gen,
            &cfg,
            CacheLayout::default(),
            3,
            &InitPolicy::stabilized(),
        )
        .unwrap();
        let o = &run.outcomes[2];
        assert!(o.triggered);
        assert_eq!(o.regen_count, 0);
        assert_eq!(o.accepted_via, AcceptedVia::RegenExhausted);
        assert_eq!(o.severity_final, 9.0);
        assert_eq!(o.pruned_indices, vec![5]);
        assert_eq!(gen.calls_for(3), 1);
        // Steps 1 and 2 lost token 5; step 3 was appended fully alive.
        assert_eq!(o.alive_rows, 30 - 2);
    }

    #[test]
    fn exhausted_retries_accept_last_attempt() {
        let mut gen = ScriptedGenerator::stubborn_spike_scenario();
        let cfg = TriggerConfig {
            max_regen: 2,
            ..TriggerConfig::default()
        };
        let run = run_stream(
            &mut gen,
            &cfg,
            CacheLayout::default(),
            3,
            &InitPolicy::stabilized(),
        )
        .unwrap();
        let o = &run.outcomes[2];
        assert_eq!(o.regen_count, 2);
        assert_eq!(o.accepted_via, AcceptedVia::RegenExhausted);
        assert!(o.severity_final > o.threshold.unwrap());
        assert_eq!(gen.calls_for(3), 3);
    }

    #[test]
    fn stats_track_final_severities() {
        let mut gen = SimGenerator::new(GeneratorConfig::default()).unwrap();
        let run = run_stream_with_stats(
            &mut gen,
            &TriggerConfig::default(),
            CacheLayout::default(),
            30,
            &InitPolicy::stabilized(),
            RunningStats::new(HistoryMode::ExactRecompute),
        )
        .unwrap();
        let finals: Vec<f64> = run.outcomes.iter().map(|o| o.severity_final).collect();
        assert_eq!(run.stats.history(), finals.as_slice());
    }

    #[test]
    fn step_one_is_rejected() {
        let mut gen = spike_script();
        let mut cache = KVCache::new(CacheLayout::default(), 10, 1).unwrap();
        let prev = LatentSummary::from_values(Array2::zeros((10, 1)), 0, 1).unwrap();
        let err = tokentrim_step(
            &prev,
            &mut gen,
            &mut cache,
            &mut RunningStats::default(),
            &TriggerConfig::default(),
            1,
        )
        .unwrap_err();
        assert!(err.is_config());
    }
}
