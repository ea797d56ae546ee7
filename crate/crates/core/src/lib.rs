//! Drift-triggered hard pruning of a temporal KV cache for chunk-wise
//! autoregressive generation, plus a deterministic desk-scale simulator and
//! experiment harness for exercising it.
//!
//! The pieces, bottom up:
//!
//! - [`latent`]: token grids, chunk summaries, per-token drift and the
//!   top-drift unstable set.
//! - [`drift`]: running statistics of accepted severities and the adaptive
//!   trigger with warm-up.
//! - [`kvcache`]: rolling and anchor+recent cache layouts, spatial pruning,
//!   context assembly and a reference attention kernel.
//! - [`controller`]: one TokenTrim step and the stream driver.
//! - [`simgen`]: a seeded synthetic generator with corruption injection.
//! - [`harness`]: presets, experiment runs, metrics files and comparisons.

pub mod controller;
pub mod drift;
pub mod error;
pub mod harness;
pub mod kvcache;
pub mod latent;
pub mod simgen;

pub use controller::{
    run_stream, run_stream_with_stats, tokentrim_step, AcceptedVia, GeneratedBatch, GeneratorPort,
    InitChunk, StepOutcome, StepResult, StreamRun,
};
pub use drift::{should_trigger, HistoryMode, RunningStats, TriggerConfig, TriggerDecision};
pub use error::{Error, Result};
pub use kvcache::{attention, CacheEntry, CacheLayout, KVCache, PruneMask};
pub use latent::{
    build_drift_profile, encode_frame, per_token_drift, summarize_chunk, DriftProfile, Encoder,
    Frame, FrameLatent, IdentityEncoder, LatentSummary, PatchifyEncoder, TokenGridShape,
};
pub use simgen::{
    inject_corruption, make_init, CorruptionEvent, GeneratorConfig, InitMode, InitPolicy,
    Persistence, ScriptedGenerator, SimGenerator,
};
