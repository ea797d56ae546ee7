//! Synthetic autoregressive latent generator.
//!
//! The generator is a small dynamical system in which cached tokens causally
//! shape future chunks through attention:
//!
//! ```text
//! q      = gain * norm(Z_prev) Wk          (one query per spatial token)
//! K, V   = [norm(Z_prev) Wk; cache], [Z_prev Wv; cache]
//! Z_next = mix * attn(q, K, V) Wv^T + (1 - mix) * Z_prev + noise
//! ```
//!
//! `norm` rescales each token row to unit RMS before the key projection
//! (QK-norm), and `Wk`/`Wv` are seeded orthonormal projections, so values read
//! back into the latent space exactly when `head_dim >= dim`. With unit-RMS
//! keys and a large query gain each token attends mostly to its own history,
//! which keeps corruption spatially local. All randomness is drawn from ChaCha streams keyed on
//! `(seed, step, purpose)`, so a regeneration at the same step sees the same
//! noise and differs from the first attempt only through its context.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::controller::{GeneratedBatch, GeneratorPort, InitChunk};
use crate::error::{Error, Result};
use crate::kvcache::{attention, KVCache};
use crate::latent::{summarize_chunk, FrameLatent, LatentSummary, TokenGridShape};

const STREAM_KEY_PROJ: u64 = 1;
const STREAM_VALUE_PROJ: u64 = 2;
const STREAM_CONTENT: u64 = 3;
const STREAM_INIT_NOISE: u64 = 4;
const STREAM_STEP_NOISE: u64 = 5;
const STREAM_JITTER: u64 = 6;
const STREAM_CORRUPTION: u64 = 7;

fn rng_for(seed: u64, purpose: u64, step: u64, extra: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((purpose << 56) ^ (step << 24) ^ extra);
    rng
}

/// Scales every row to unit root-mean-square; all-zero rows stay zero.
pub fn rms_normalize(m: &Array2<f64>) -> Array2<f64> {
    let mut out = m.clone();
    let cols = m.ncols() as f64;
    for mut row in out.rows_mut() {
        let rms = (row.iter().map(|x| x * x).sum::<f64>() / cols).sqrt();
        if rms > 0.0 {
            row.mapv_inplace(|x| x / rms);
        }
    }
    out
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

/// `dim x head_dim` matrix with orthonormal columns (or rows, when
/// `head_dim > dim`), from the QR factorization of a seeded Gaussian.
fn orthonormal_projection(dim: usize, head_dim: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let (tall, short) = (dim.max(head_dim), dim.min(head_dim));
    let g = gaussian(rng, tall, short);
    let q = DMatrix::from_fn(tall, short, |i, j| g[[i, j]]).qr().q();
    if dim >= head_dim {
        Array2::from_shape_fn((dim, head_dim), |(i, j)| q[(i, j)])
    } else {
        Array2::from_shape_fn((dim, head_dim), |(i, j)| q[(j, i)])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Persistence {
    /// The offset lands on the visible chunk latents (frames, summary and
    /// the KV derived from them).
    OneShot,
    /// The offset lands only on the chunk's cached values. The frames look
    /// clean, but every later chunk that attends to this entry reads the
    /// corruption back.
    RecurringViaContext,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionEvent {
    pub step: usize,
    pub token_indices: Vec<usize>,
    pub magnitude: f64,
    pub persistence: Persistence,
}

pub const DEFAULT_CORRUPTION_STEP: usize = 10;
pub const DEFAULT_CORRUPTION_MAGNITUDE: f64 = 1.5;
/// A compact 2x4 block (minus one corner) on the default 8x8 grid, sized to
/// `ceil(0.1 * 64)`.
pub const DEFAULT_CORRUPTION_TOKENS: [usize; 7] = [18, 19, 20, 21, 26, 27, 28];

impl CorruptionEvent {
    /// The corruption scenario used by the experiment presets.
    pub fn default_scenario() -> Self {
        Self {
            step: DEFAULT_CORRUPTION_STEP,
            token_indices: DEFAULT_CORRUPTION_TOKENS.to_vec(),
            magnitude: DEFAULT_CORRUPTION_MAGNITUDE,
            persistence: Persistence::RecurringViaContext,
        }
    }

    pub fn validate(&self, n_tokens: usize, at: &str) -> Result<()> {
        if !(self.magnitude > 0.0 && self.magnitude.is_finite()) {
            return Err(Error::config(
                format!("{at}.magnitude"),
                format!("must be positive, got {}", self.magnitude),
            ));
        }
        if self.token_indices.is_empty() {
            return Err(Error::config(
                format!("{at}.token_indices"),
                "must not be empty",
            ));
        }
        if let Some(&i) = self.token_indices.iter().find(|&&i| i >= n_tokens) {
            return Err(Error::config(
                format!("{at}.token_indices"),
                format!("index {i} out of range for {n_tokens} tokens"),
            ));
        }
        if self.step == 0 {
            return Err(Error::config(format!("{at}.step"), "steps are 1-based"));
        }
        Ok(())
    }
}

/// Adds an offset of Euclidean norm `event.magnitude` to every listed token
/// row. Directions are seeded per `(seed, step, token)`.
pub fn inject_corruption(
    latents: &Array2<f64>,
    event: &CorruptionEvent,
    seed: u64,
) -> Result<Array2<f64>> {
    let (n, dim) = latents.dim();
    let mut out = latents.clone();
    for &i in &event.token_indices {
        if i >= n {
            return Err(Error::shape(format!(
                "corruption index {i} out of range for {n} tokens"
            )));
        }
        let mut rng = rng_for(seed, STREAM_CORRUPTION, event.step as u64, i as u64);
        let dir = gaussian(&mut rng, 1, dim);
        let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut row = out.row_mut(i);
        row.scaled_add(event.magnitude / norm, &dir.row(0));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    Plain,
    Stabilized,
    /// No first-chunk noise at all; used for clean reference trajectories.
    NoiseFree,
}

/// How the first chunk is produced. Stabilized init stands in for a
/// motion-guided first batch by lowering its noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitPolicy {
    pub mode: InitMode,
    #[serde(default = "default_stabilized_scale")]
    pub stabilized_noise_scale: f64,
}

pub const DEFAULT_STABILIZED_SCALE: f64 = 0.5;

fn default_stabilized_scale() -> f64 {
    DEFAULT_STABILIZED_SCALE
}

impl Default for InitPolicy {
    fn default() -> Self {
        Self::stabilized()
    }
}

impl InitPolicy {
    pub fn plain() -> Self {
        Self {
            mode: InitMode::Plain,
            stabilized_noise_scale: DEFAULT_STABILIZED_SCALE,
        }
    }

    pub fn stabilized() -> Self {
        Self {
            mode: InitMode::Stabilized,
            stabilized_noise_scale: DEFAULT_STABILIZED_SCALE,
        }
    }

    pub fn noise_free() -> Self {
        Self {
            mode: InitMode::NoiseFree,
            stabilized_noise_scale: DEFAULT_STABILIZED_SCALE,
        }
    }

    pub fn noise_scale(&self) -> f64 {
        match self.mode {
            InitMode::Plain => 1.0,
            InitMode::Stabilized => self.stabilized_noise_scale,
            InitMode::NoiseFree => 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.stabilized_noise_scale;
        if self.mode == InitMode::Stabilized && !(s > 0.0 && s <= 1.0) {
            return Err(Error::config(
                "init.stabilized_noise_scale",
                format!("must lie in (0, 1], got {s}"),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub n_tokens: usize,
    pub dim: usize,
    pub head_dim: usize,
    pub frames_per_chunk: usize,
    pub seed: u64,
    /// Per-coordinate standard deviation of the step noise.
    pub base_noise: f64,
    /// Weight of the attention readout against the previous summary.
    pub context_mix: f64,
    /// Multiplier on the queries; larger values make attention more local.
    pub query_gain: f64,
    /// Per-frame jitter relative to `base_noise`; centered so it averages out.
    pub frame_jitter: f64,
    pub corruption: Vec<CorruptionEvent>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_tokens: 64,
            dim: 16,
            head_dim: 16,
            frames_per_chunk: 3,
            seed: 0,
            base_noise: 0.02,
            context_mix: 0.6,
            query_gain: 8.0,
            frame_jitter: 0.5,
            corruption: Vec::new(),
        }
    }
}

impl GeneratorConfig {
    pub fn with_default_corruption() -> Self {
        Self {
            corruption: vec![CorruptionEvent::default_scenario()],
            ..Self::default()
        }
    }

    pub fn shape(&self) -> Result<TokenGridShape> {
        TokenGridShape::new(self.n_tokens, self.dim)
            .map_err(|_| Error::config("generator.n_tokens", "token grid must be non-empty"))
    }

    pub fn validate(&self) -> Result<()> {
        self.shape()?;
        if self.head_dim == 0 {
            return Err(Error::config("generator.head_dim", "must be at least 1"));
        }
        if self.frames_per_chunk == 0 {
            return Err(Error::config(
                "generator.frames_per_chunk",
                "must be at least 1",
            ));
        }
        if !(self.base_noise >= 0.0 && self.base_noise.is_finite()) {
            return Err(Error::config(
                "generator.base_noise",
                "must be non-negative",
            ));
        }
        if !(0.0..=1.0).contains(&self.context_mix) {
            return Err(Error::config("generator.context_mix", "must lie in [0, 1]"));
        }
        if !(self.query_gain.is_finite() && self.frame_jitter >= 0.0) {
            return Err(Error::config(
                "generator.query_gain",
                "query gain must be finite and frame jitter non-negative",
            ));
        }
        for (k, event) in self.corruption.iter().enumerate() {
            event.validate(self.n_tokens, &format!("generator.corruption[{k}]"))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SimGenerator {
    cfg: GeneratorConfig,
    shape: TokenGridShape,
    w_key: Array2<f64>,
    w_value: Array2<f64>,
}

impl SimGenerator {
    pub fn new(cfg: GeneratorConfig) -> Result<Self> {
        cfg.validate()?;
        let shape = cfg.shape()?;
        let w_key = orthonormal_projection(
            cfg.dim,
            cfg.head_dim,
            &mut rng_for(cfg.seed, STREAM_KEY_PROJ, 0, 0),
        );
        let w_value = orthonormal_projection(
            cfg.dim,
            cfg.head_dim,
            &mut rng_for(cfg.seed, STREAM_VALUE_PROJ, 0, 0),
        );
        Ok(Self {
            cfg,
            shape,
            w_key,
            w_value,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    /// Noise-free scene content the first chunk is drawn around.
    pub fn content(&self) -> Array2<f64> {
        gaussian(
            &mut rng_for(self.cfg.seed, STREAM_CONTENT, 0, 0),
            self.cfg.n_tokens,
            self.cfg.dim,
        )
    }

    /// Cached keys for a chunk latent.
    pub fn keys_for(&self, latent: &Array2<f64>) -> Array2<f64> {
        rms_normalize(latent).dot(&self.w_key)
    }

    pub fn values_for(&self, latent: &Array2<f64>) -> Array2<f64> {
        latent.dot(&self.w_value)
    }

    /// Attention readout of `prev`'s queries over `[prev; cache]`, mapped back
    /// to latent space.
    pub fn readout(&self, prev: ArrayView2<'_, f64>, cache: &KVCache) -> Result<Array2<f64>> {
        let k_curr = rms_normalize(&prev.to_owned()).dot(&self.w_key);
        let v_curr = prev.dot(&self.w_value);
        let q = &k_curr * self.cfg.query_gain;
        let (keys, values) = cache.assemble_context(k_curr.view(), v_curr.view())?;
        Ok(attention(q.view(), keys.view(), values.view())?.dot(&self.w_value.t()))
    }

    fn events_at(
        &self,
        step: usize,
        persistence: Persistence,
    ) -> impl Iterator<Item = &CorruptionEvent> {
        self.cfg
            .corruption
            .iter()
            .filter(move |e| e.step == step && e.persistence == persistence)
    }

    /// Turns a chunk latent into frames, summary-consistent KV, and applies
    /// any corruption scheduled for `step`.
    fn emit(&self, mut latent: Array2<f64>, step: usize) -> Result<GeneratedBatch> {
        for event in self.events_at(step, Persistence::OneShot) {
            latent = inject_corruption(&latent, event, self.cfg.seed)?;
        }

        let f = self.cfg.frames_per_chunk;
        let scale = self.cfg.base_noise * self.cfg.frame_jitter;
        let mut rng = rng_for(self.cfg.seed, STREAM_JITTER, step as u64, 0);
        let jitter: Vec<Array2<f64>> = (0..f)
            .map(|_| gaussian(&mut rng, self.cfg.n_tokens, self.cfg.dim) * scale)
            .collect();
        let mean_jitter = jitter
            .iter()
            .fold(Array2::<f64>::zeros(latent.dim()), |acc, j| acc + j)
            / f as f64;
        let frames = jitter
            .into_iter()
            .map(|j| FrameLatent::new(&latent + &(j - &mean_jitter)))
            .collect::<Result<Vec<_>>>()?;

        let summary = summarize_chunk(&frames, step)?;
        let keys = self.keys_for(summary.values());
        let mut value_src = summary.values().clone();
        for event in self.events_at(step, Persistence::RecurringViaContext) {
            value_src = inject_corruption(&value_src, event, self.cfg.seed)?;
        }
        let values = value_src.dot(&self.w_value);
        Ok(GeneratedBatch {
            frames,
            keys,
            values,
        })
    }
}

/// First chunk: scene content plus seeded noise scaled by the init policy.
pub fn make_init(policy: &InitPolicy, cfg: &GeneratorConfig) -> Result<InitChunk> {
    SimGenerator::new(cfg.clone())?.init_chunk(policy)
}

impl GeneratorPort for SimGenerator {
    fn shape(&self) -> TokenGridShape {
        self.shape
    }

    fn head_dim(&self) -> usize {
        self.cfg.head_dim
    }

    fn init_chunk(&mut self, policy: &InitPolicy) -> Result<InitChunk> {
        policy.validate()?;
        let content = self.content();
        let noise = gaussian(
            &mut rng_for(self.cfg.seed, STREAM_INIT_NOISE, 0, 0),
            self.cfg.n_tokens,
            self.cfg.dim,
        );
        let latent = &content + &(noise * (self.cfg.base_noise * policy.noise_scale()));
        Ok(InitChunk {
            anchor: LatentSummary::from_values(content, 0, 1)?,
            batch: self.emit(latent, 1)?,
        })
    }

    fn generate_batch(
        &mut self,
        prev: &LatentSummary,
        cache: &KVCache,
        step: usize,
    ) -> Result<GeneratedBatch> {
        if prev.shape() != self.shape {
            return Err(Error::shape(format!(
                "previous summary is {:?}, generator expects {:?}",
                prev.shape(),
                self.shape
            )));
        }
        let mix = self.cfg.context_mix;
        let mut latent = prev.values() * (1.0 - mix);
        if mix > 0.0 {
            latent.scaled_add(mix, &self.readout(prev.values().view(), cache)?);
        }
        if self.cfg.base_noise > 0.0 {
            let mut rng = rng_for(self.cfg.seed, STREAM_STEP_NOISE, step as u64, 0);
            let noise = gaussian(&mut rng, self.cfg.n_tokens, self.cfg.dim);
            latent.scaled_add(self.cfg.base_noise, &noise);
        }
        self.emit(latent, step)
    }
}

/// Replays hand-written chunk summaries. `D = head_dim = 1`, one frame per
/// chunk, and keys/values equal the summary.
///
/// The n-th call for a step returns the n-th scripted attempt for that step
/// (the last one repeats). Steps without a script continue a ramp on token 0.
#[derive(Debug, Clone)]
pub struct ScriptedGenerator {
    n_tokens: usize,
    first: Vec<f64>,
    attempts: BTreeMap<usize, Vec<Vec<f64>>>,
    calls: Vec<(usize, usize)>,
}

impl ScriptedGenerator {
    pub fn new(n_tokens: usize, first: Vec<f64>) -> Self {
        Self {
            n_tokens,
            first,
            attempts: BTreeMap::new(),
            calls: Vec::new(),
        }
    }

    pub fn script(mut self, step: usize, attempts: Vec<Vec<f64>>) -> Self {
        self.attempts.insert(step, attempts);
        self
    }

    fn ramp(n: usize, level: f64) -> Vec<f64> {
        let mut v = vec![0.0; n];
        v[0] = level;
        v
    }

    /// Drift 1.0 at steps 1 and 2, a 9.0 spike on token 5 at step 3 whose
    /// regeneration falls back to drift 1.0.
    pub fn spike_scenario() -> Self {
        let mut spike = Self::ramp(10, 2.0);
        spike[5] = 9.0;
        Self::new(10, Self::ramp(10, 1.0))
            .script(2, vec![Self::ramp(10, 2.0)])
            .script(3, vec![spike, Self::ramp(10, 3.0)])
    }

    /// Like [`spike_scenario`](Self::spike_scenario), but every regeneration
    /// spikes again (on token 7).
    pub fn stubborn_spike_scenario() -> Self {
        let mut spike = Self::ramp(10, 2.0);
        spike[5] = 9.0;
        let mut again = Self::ramp(10, 2.0);
        again[7] = 9.0;
        Self::new(10, Self::ramp(10, 1.0))
            .script(2, vec![Self::ramp(10, 2.0)])
            .script(3, vec![spike, again])
    }

    /// `(step, alive cached rows)` for every generate call so far.
    pub fn calls(&self) -> &[(usize, usize)] {
        &self.calls
    }

    pub fn calls_for(&self, step: usize) -> usize {
        self.calls.iter().filter(|(s, _)| *s == step).count()
    }

    fn batch(&self, tokens: &[f64]) -> Result<GeneratedBatch> {
        let m = Array2::from_shape_vec((self.n_tokens, 1), tokens.to_vec())
            .map_err(|e| Error::Generator(e.to_string()))?;
        Ok(GeneratedBatch {
            frames: vec![FrameLatent::new(m.clone())?],
            keys: m.clone(),
            values: m,
        })
    }
}

impl GeneratorPort for ScriptedGenerator {
    fn shape(&self) -> TokenGridShape {
        TokenGridShape {
            n_tokens: self.n_tokens,
            dim: 1,
        }
    }

    fn head_dim(&self) -> usize {
        1
    }

    fn init_chunk(&mut self, _policy: &InitPolicy) -> Result<InitChunk> {
        Ok(InitChunk {
            anchor: LatentSummary::from_values(Array2::zeros((self.n_tokens, 1)), 0, 1)?,
            batch: self.batch(&self.first.clone())?,
        })
    }

    fn generate_batch(
        &mut self,
        _prev: &LatentSummary,
        cache: &KVCache,
        step: usize,
    ) -> Result<GeneratedBatch> {
        let attempt = self.calls_for(step);
        self.calls.push((step, cache.alive_rows()));
        let tokens = match self.attempts.get(&step) {
            Some(list) if !list.is_empty() => list[attempt.min(list.len() - 1)].clone(),
            _ => Self::ramp(self.n_tokens, step as f64),
        };
        self.batch(&tokens)
    }
}
