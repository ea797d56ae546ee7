//! Latent token grids, chunk summaries and per-token drift.
//!
//! A chunk of `F` frames is encoded into `F` latent grids of `N` spatial tokens
//! with `D` channels each. Averaging those grids over time gives one summary per
//! chunk, and consecutive summaries are compared token by token.

use std::cmp::Ordering;

use ndarray::{Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of spatial tokens and latent width of every grid in one stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenGridShape {
    pub n_tokens: usize,
    pub dim: usize,
}

impl TokenGridShape {
    pub fn new(n_tokens: usize, dim: usize) -> Result<Self> {
        if n_tokens == 0 || dim == 0 {
            return Err(Error::shape(format!(
                "token grid must be non-empty, got {n_tokens}x{dim}"
            )));
        }
        Ok(Self { n_tokens, dim })
    }

    pub fn check(&self, values: &Array2<f64>, what: &str) -> Result<()> {
        if values.dim() != (self.n_tokens, self.dim) {
            return Err(Error::shape(format!(
                "{what} is {}x{}, expected {}x{}",
                values.nrows(),
                values.ncols(),
                self.n_tokens,
                self.dim
            )));
        }
        Ok(())
    }
}

fn check_finite(values: &Array2<f64>, what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// One encoded frame: row `i` is token `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameLatent {
    shape: TokenGridShape,
    values: Array2<f64>,
}

impl FrameLatent {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        let shape = TokenGridShape::new(values.nrows(), values.ncols())?;
        check_finite(&values, "frame latent")?;
        Ok(Self { shape, values })
    }

    pub fn shape(&self) -> TokenGridShape {
        self.shape
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }
}

/// Temporal mean of a chunk's frame latents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentSummary {
    shape: TokenGridShape,
    values: Array2<f64>,
    source_step: usize,
    frame_count: usize,
}

impl LatentSummary {
    /// Wraps an already-averaged grid. `frame_count` must be at least one.
    pub fn from_values(
        values: Array2<f64>,
        source_step: usize,
        frame_count: usize,
    ) -> Result<Self> {
        if frame_count == 0 {
            return Err(Error::EmptyChunk);
        }
        let shape = TokenGridShape::new(values.nrows(), values.ncols())?;
        check_finite(&values, "latent summary")?;
        Ok(Self {
            shape,
            values,
            source_step,
            frame_count,
        })
    }

    pub fn shape(&self) -> TokenGridShape {
        self.shape
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn source_step(&self) -> usize {
        self.source_step
    }

    pub fn frame_count(&self) -> usize {
        self.frame_count
    }

    pub fn token(&self, i: usize) -> ArrayView1<'_, f64> {
        self.values.row(i)
    }
}

/// Raw image payload in row-major HWC order.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Frame {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::shape(format!(
                "frame buffer has {} values, expected {height}*{width}*{channels}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }
}

/// Maps a frame payload to an `N x D` token grid.
pub trait Encoder {
    type Input;

    fn encode(&self, input: &Self::Input) -> Result<Array2<f64>>;
}

/// Passes already-latent grids through untouched.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityEncoder;

impl Encoder for IdentityEncoder {
    type Input = Array2<f64>;

    fn encode(&self, input: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(input.clone())
    }
}

/// Splits an image into non-overlapping square patches in raster order and
/// flattens each patch (row, column, channel) into one token, optionally
/// followed by a fixed linear projection.
#[derive(Debug, Clone)]
pub struct PatchifyEncoder {
    pub patch: usize,
    pub projection: Option<Array2<f64>>,
}

impl PatchifyEncoder {
    pub fn new(patch: usize) -> Self {
        Self {
            patch,
            projection: None,
        }
    }

    pub fn with_projection(patch: usize, projection: Array2<f64>) -> Self {
        Self {
            patch,
            projection: Some(projection),
        }
    }
}

impl Encoder for PatchifyEncoder {
    type Input = Frame;

    fn encode(&self, frame: &Frame) -> Result<Array2<f64>> {
        let p = self.patch;
        if p == 0 || !frame.height.is_multiple_of(p) || !frame.width.is_multiple_of(p) {
            return Err(Error::shape(format!(
                "{}x{} frame is not divisible into {p}x{p} patches",
                frame.height, frame.width
            )));
        }
        let (rows, cols) = (frame.height / p, frame.width / p);
        let token_len = p * p * frame.channels;
        let mut tokens = Array2::zeros((rows * cols, token_len));
        for py in 0..rows {
            for px in 0..cols {
                let mut row = tokens.row_mut(py * cols + px);
                let mut k = 0;
                for dy in 0..p {
                    for dx in 0..p {
                        for c in 0..frame.channels {
                            row[k] = frame.at(py * p + dy, px * p + dx, c);
                            k += 1;
                        }
                    }
                }
            }
        }
        match &self.projection {
            None => Ok(tokens),
            Some(w) if w.nrows() == token_len => Ok(tokens.dot(w)),
            Some(w) => Err(Error::shape(format!(
                "projection expects {} inputs, patches have {token_len}",
                w.nrows()
            ))),
        }
    }
}

/// Encodes one frame and checks the result against the stream's grid shape.
pub fn encode_frame<E: Encoder>(
    frame: &E::Input,
    encoder: &E,
    shape: TokenGridShape,
) -> Result<FrameLatent> {
    let values = encoder.encode(frame)?;
    shape.check(&values, "encoder output")?;
    FrameLatent::new(values)
}

/// Elementwise temporal mean of a chunk's frame latents.
///
/// Uses the incremental mean so that a chunk of identical frames summarizes to
/// exactly that frame.
pub fn summarize_chunk(frames: &[FrameLatent], step: usize) -> Result<LatentSummary> {
    let (first, rest) = frames.split_first().ok_or(Error::EmptyChunk)?;
    let shape = first.shape();
    let mut mean = first.values().clone();
    for (k, frame) in rest.iter().enumerate() {
        shape.check(frame.values(), "frame latent")?;
        let n = (k + 2) as f64;
        mean.zip_mut_with(frame.values(), |m, &x| *m += (x - *m) / n);
    }
    LatentSummary::from_values(mean, step, frames.len())
}

/// Euclidean distance between matching token rows of two summaries.
pub fn per_token_drift(curr: &LatentSummary, prev: &LatentSummary) -> Result<Vec<f64>> {
    if curr.shape() != prev.shape() {
        return Err(Error::shape(format!(
            "cannot compare {:?} with {:?}",
            curr.shape(),
            prev.shape()
        )));
    }
    Ok(curr
        .values()
        .axis_iter(Axis(0))
        .zip(prev.values().axis_iter(Axis(0)))
        .map(|(a, b)| {
            a.iter()
                .zip(b.iter())
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt()
        })
        .collect())
}

/// `ceil(p * n)`, snapping products that land within rounding error of an
/// integer (0.3 * 10 is 3.0000000000000004 in binary).
pub fn selection_size(fraction: f64, n: usize) -> usize {
    let raw = fraction * n as f64;
    let nearest = raw.round();
    if (raw - nearest).abs() <= 1e-9 * (n as f64).max(1.0) {
        nearest as usize
    } else {
        raw.ceil() as usize
    }
}

/// Validates a pruning fraction for a grid of `n` tokens and returns `|S_t|`.
pub fn checked_selection_size(fraction: f64, n: usize) -> Result<usize> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::config(
            "trigger.fraction",
            format!("must lie in (0, 1), got {fraction}"),
        ));
    }
    let k = selection_size(fraction, n);
    if k >= n {
        return Err(Error::config(
            "trigger.fraction",
            format!("ceil({fraction} * {n}) = {k} would prune every token"),
        ));
    }
    Ok(k.max(1))
}

/// Drift ranking order: larger drift first, lower index breaks ties.
pub fn drift_order(drift: &[f64], a: usize, b: usize) -> Ordering {
    drift[b].total_cmp(&drift[a]).then(a.cmp(&b))
}

/// Per-token drift together with the unstable set and its mean drift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftProfile {
    pub per_token: Vec<f64>,
    /// Indices of the top-drift tokens, largest drift first.
    pub selected: Vec<usize>,
    pub severity: f64,
    pub fraction: f64,
}

impl DriftProfile {
    pub fn n_tokens(&self) -> usize {
        self.per_token.len()
    }
}

pub fn build_drift_profile(drift: Vec<f64>, fraction: f64) -> Result<DriftProfile> {
    if drift.is_empty() {
        return Err(Error::shape("drift vector is empty"));
    }
    if let Some(bad) = drift.iter().find(|d| !d.is_finite() || **d < 0.0) {
        return Err(Error::NonFinite(format!("drift score {bad}")));
    }
    let k = checked_selection_size(fraction, drift.len())?;

    let mut order: Vec<usize> = (0..drift.len()).collect();
    if k < order.len() {
        order.select_nth_unstable_by(k - 1, |&a, &b| drift_order(&drift, a, b));
        order.truncate(k);
    }
    order.sort_unstable_by(|&a, &b| drift_order(&drift, a, b));

    let severity = order.iter().map(|&i| drift[i]).sum::<f64>() / k as f64;
    Ok(DriftProfile {
        per_token: drift,
        selected: order,
        severity,
        fraction,
    })
}

/// Summarize, score and rank in one go.
pub fn drift_profile(
    curr: &LatentSummary,
    prev: &LatentSummary,
    fraction: f64,
) -> Result<DriftProfile> {
    build_drift_profile(per_token_drift(curr, prev)?, fraction)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn summary(values: Array2<f64>) -> LatentSummary {
        LatentSummary::from_values(values, 1, 1).unwrap()
    }

    fn frame(values: Array2<f64>) -> FrameLatent {
        FrameLatent::new(values).unwrap()
    }

    #[test]
    fn identity_encoder_passes_payload_through() {
        let payload = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        let shape = TokenGridShape::new(3, 2).unwrap();
        let latent = encode_frame(&payload, &IdentityEncoder, shape).unwrap();
        assert_eq!(latent.values(), &payload);
    }

    #[test]
    fn patchify_matches_hand_built_patches() {
        // 4x4 single-channel image holding 0..16 in raster order.
        let image = Frame::new(4, 4, 1, (0..16).map(f64::from).collect()).unwrap();
        let shape = TokenGridShape::new(4, 4).unwrap();
        let latent = encode_frame(&image, &PatchifyEncoder::new(2), shape).unwrap();
        let expected = array![
            [0.0, 1.0, 4.0, 5.0],
            [2.0, 3.0, 6.0, 7.0],
            [8.0, 9.0, 12.0, 13.0],
            [10.0, 11.0, 14.0, 15.0],
        ];
        assert_eq!(latent.values(), &expected);
    }

    #[test]
    fn patchify_projection_and_shape_errors() {
        let image = Frame::new(4, 4, 1, vec![1.0; 16]).unwrap();
        let proj = Array2::from_elem((4, 2), 0.5);
        let enc = PatchifyEncoder::with_projection(2, proj);
        let latent = encode_frame(&image, &enc, TokenGridShape::new(4, 2).unwrap()).unwrap();
        assert!(latent.values().iter().all(|&v| v == 2.0));

        let err = encode_frame(&image, &enc, TokenGridShape::new(4, 3).unwrap()).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
        assert!(PatchifyEncoder::new(3).encode(&image).is_err());
    }

    #[test]
    fn non_finite_encoder_output_is_rejected() {
        let payload = array![[1.0, f64::NAN]];
        let err = encode_frame(
            &payload,
            &IdentityEncoder,
            TokenGridShape::new(1, 2).unwrap(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }

    #[test]
    fn summarize_identical_frames_is_exact() {
        let z = array![[0.1, 0.7], [1.0 / 3.0, -2.5]];
        let frames = vec![frame(z.clone()); 3];
        assert_eq!(summarize_chunk(&frames, 4).unwrap().values(), &z);
        let single = summarize_chunk(&frames[..1], 4).unwrap();
        assert_eq!(single.values(), &z);
        assert_eq!(single.frame_count(), 1);
        assert_eq!(single.source_step(), 4);
    }

    #[test]
    fn summarize_two_frames() {
        let frames = vec![frame(array![[0.0, 0.0]]), frame(array![[2.0, 4.0]])];
        let s = summarize_chunk(&frames, 2).unwrap();
        assert_eq!(s.values(), &array![[1.0, 2.0]]);
        assert_eq!(s.frame_count(), 2);
    }

    #[test]
    fn summarize_errors() {
        assert!(matches!(summarize_chunk(&[], 1), Err(Error::EmptyChunk)));
        let frames = vec![frame(array![[0.0, 0.0]]), frame(array![[1.0, 2.0, 3.0]])];
        assert!(matches!(summarize_chunk(&frames, 1), Err(Error::Shape(_))));
    }

    #[test]
    fn drift_of_identical_summaries_is_zero() {
        let z = summary(array![[1.0, 2.0], [3.0, 4.0]]);
        assert_eq!(per_token_drift(&z, &z).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn drift_three_four_five() {
        let prev = summary(array![[0.0, 0.0], [1.0, 1.0]]);
        let curr = summary(array![[3.0, 4.0], [1.0, 1.0]]);
        assert_eq!(per_token_drift(&curr, &prev).unwrap(), vec![5.0, 0.0]);
        let other = summary(array![[0.0, 0.0, 0.0]]);
        assert!(matches!(
            per_token_drift(&curr, &other),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn profile_single_spike() {
        let mut drift = vec![0.0; 10];
        drift[9] = 7.0;
        let p = build_drift_profile(drift, 0.1).unwrap();
        assert_eq!(p.selected, vec![9]);
        assert_eq!(p.severity, 7.0);
    }

    #[test]
    fn selection_size_uses_ceiling() {
        assert_eq!(selection_size(0.25, 10), 3);
        assert_eq!(selection_size(0.1, 64), 7);
        assert_eq!(selection_size(0.2, 64), 13);
        assert_eq!(selection_size(0.05, 64), 4);
        assert_eq!(selection_size(0.3, 10), 3);
        assert_eq!(selection_size(0.1, 10), 1);
        let p = build_drift_profile((0..10).map(f64::from).collect(), 0.25).unwrap();
        assert_eq!(p.selected, vec![9, 8, 7]);
    }

    #[test]
    fn ties_prefer_lower_indices() {
        let p = build_drift_profile(vec![2.5; 10], 0.3).unwrap();
        assert_eq!(p.selected, vec![0, 1, 2]);
        assert_eq!(p.severity, 2.5);
    }

    #[test]
    fn fraction_must_leave_context() {
        for bad in [0.0, 1.0, -0.1, 1.5, f64::NAN] {
            assert!(matches!(
                build_drift_profile(vec![1.0; 4], bad),
                Err(Error::Config { .. })
            ));
        }
        // ceil(0.9 * 4) = 4 prunes every token.
        assert!(matches!(
            build_drift_profile(vec![1.0; 4], 0.9),
            Err(Error::Config { .. })
        ));
        assert!(build_drift_profile(vec![1.0; 4], 0.7).is_ok());
    }

    #[test]
    fn negative_or_nan_drift_is_rejected() {
        assert!(build_drift_profile(vec![1.0, -1.0], 0.4).is_err());
        assert!(build_drift_profile(vec![1.0, f64::NAN], 0.4).is_err());
        assert!(build_drift_profile(vec![], 0.4).is_err());
    }

    fn grid(n: usize, d: usize) -> impl Strategy<Value = Array2<f64>> {
        proptest::collection::vec(-10.0..10.0f64, n * d)
            .prop_map(move |v| Array2::from_shape_vec((n, d), v).unwrap())
    }

    fn grid_pair() -> impl Strategy<Value = (Array2<f64>, Array2<f64>)> {
        (2usize..24, 1usize..6).prop_flat_map(|(n, d)| (grid(n, d), grid(n, d)))
    }

    proptest! {
        #[test]
        fn drift_is_permutation_equivariant(
            (a, b) in grid_pair(),
            seed in any::<u64>(),
            fraction in 0.05..0.5f64,
        ) {
            let n = a.nrows();
            // Random permutation from the seed via a key sort.
            let mut perm: Vec<usize> = (0..n).collect();
            perm.sort_by_key(|&i| (i as u64 + 1).wrapping_mul(seed | 1).rotate_left(17));
            let permute = |m: &Array2<f64>| m.select(Axis(0), &perm);

            let base = drift_profile(&summary(a.clone()), &summary(b.clone()), fraction).unwrap();
            let moved = drift_profile(&summary(permute(&a)), &summary(permute(&b)), fraction).unwrap();
            for (new_i, &old_i) in perm.iter().enumerate() {
                prop_assert_eq!(moved.per_token[new_i], base.per_token[old_i]);
            }
            prop_assert!((moved.severity - base.severity).abs() <= 1e-12 * base.severity.max(1.0));
            // Selected sets agree as sets of drift values (ties may map to different indices).
            let mut x: Vec<f64> = base.selected.iter().map(|&i| base.per_token[i]).collect();
            let mut y: Vec<f64> = moved.selected.iter().map(|&i| moved.per_token[i]).collect();
            x.sort_by(f64::total_cmp);
            y.sort_by(f64::total_cmp);
            prop_assert_eq!(x, y);
        }

        #[test]
        fn drift_scales_with_inputs((a, b) in grid_pair(), s in 0.01..100.0f64) {
            let base = drift_profile(&summary(a.clone()), &summary(b.clone()), 0.2).unwrap();
            let scaled = drift_profile(&summary(&a * s), &summary(&b * s), 0.2).unwrap();
            for (x, y) in base.per_token.iter().zip(&scaled.per_token) {
                prop_assert!((x * s - y).abs() <= 1e-9 * (x * s).max(1e-12));
            }
            prop_assert!((base.severity * s - scaled.severity).abs() <= 1e-9 * (base.severity * s).max(1e-12));
        }

        #[test]
        fn summary_ignores_frame_order(
            frames in (1usize..6, 1usize..4).prop_flat_map(|(n, d)| proptest::collection::vec(grid(n, d), 1..6)),
        ) {
            let fwd: Vec<_> = frames.iter().cloned().map(frame).collect();
            let rev: Vec<_> = fwd.iter().rev().cloned().collect();
            let a = summarize_chunk(&fwd, 1).unwrap();
            let b = summarize_chunk(&rev, 1).unwrap();
            for (x, y) in a.values().iter().zip(b.values()) {
                prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
            }
        }

        #[test]
        fn profile_is_top_by_drift(
            drift in proptest::collection::vec(prop_oneof![0.0..5.0f64, Just(1.0)], 2..64),
            fraction in 0.01..0.99f64,
        ) {
            let n = drift.len();
            prop_assume!(selection_size(fraction, n) < n);
            let p = build_drift_profile(drift.clone(), fraction).unwrap();
            prop_assert_eq!(p.selected.len(), selection_size(fraction, n).max(1));
            let min_in = p.selected.iter().map(|&i| drift[i]).fold(f64::INFINITY, f64::min);
            let max_out = (0..n)
                .filter(|i| !p.selected.contains(i))
                .map(|i| drift[i])
                .fold(0.0, f64::max);
            prop_assert!(min_in >= max_out);
        }
    }
}
