//! Temporal key/value cache over previously generated chunks.
//!
//! Each cached chunk keeps its `N` key/value rows plus a per-token `alive`
//! flag. Pruning clears flags instead of compacting storage; compaction
//! happens when the context is assembled for attention.

use std::collections::VecDeque;

use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_WINDOW: usize = 4;
pub const DEFAULT_ANCHOR: usize = 1;
pub const DEFAULT_RECENT: usize = 3;

/// Which cached chunks exist and which of them pruning may touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum CacheLayout {
    /// Last `window` chunks; everything is prunable.
    Rolling { window: usize },
    /// First `anchor` chunks are kept forever and never pruned; the last
    /// `recent` chunks roll and are prunable.
    AnchorRecent { anchor: usize, recent: usize },
}

impl Default for CacheLayout {
    fn default() -> Self {
        CacheLayout::Rolling {
            window: DEFAULT_WINDOW,
        }
    }
}

impl CacheLayout {
    pub fn anchor_recent_default() -> Self {
        CacheLayout::AnchorRecent {
            anchor: DEFAULT_ANCHOR,
            recent: DEFAULT_RECENT,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            CacheLayout::Rolling { window: 0 } => {
                Err(Error::config("layout.window", "must be at least 1"))
            }
            CacheLayout::AnchorRecent { recent: 0, .. } => {
                Err(Error::config("layout.recent", "must be at least 1"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CacheEntry {
    pub chunk_step: usize,
    pub keys: Array2<f64>,
    pub values: Array2<f64>,
    pub alive: Vec<bool>,
    pub anchor: bool,
}

impl CacheEntry {
    pub fn alive_count(&self) -> usize {
        self.alive.iter().filter(|&&a| a).count()
    }
}

/// Spatial keep-mask: `false` marks a pruned token position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PruneMask {
    keep: Vec<bool>,
}

impl PruneMask {
    pub fn keep_all(n: usize) -> Self {
        Self {
            keep: vec![true; n],
        }
    }

    /// Mask that drops exactly the listed token indices.
    pub fn dropping(n: usize, indices: &[usize]) -> Result<Self> {
        let mut keep = vec![true; n];
        for &i in indices {
            *keep.get_mut(i).ok_or_else(|| {
                Error::shape(format!("prune index {i} out of range for {n} tokens"))
            })? = false;
        }
        Ok(Self { keep })
    }

    pub fn from_keep(keep: Vec<bool>) -> Self {
        Self { keep }
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    pub fn keeps(&self, i: usize) -> bool {
        self.keep[i]
    }

    pub fn pruned_count(&self) -> usize {
        self.keep.iter().filter(|&&k| !k).count()
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.keep
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KVCache {
    layout: CacheLayout,
    n_tokens: usize,
    head_dim: usize,
    entries: VecDeque<CacheEntry>,
}

impl KVCache {
    pub fn new(layout: CacheLayout, n_tokens: usize, head_dim: usize) -> Result<Self> {
        layout.validate()?;
        if n_tokens == 0 || head_dim == 0 {
            return Err(Error::shape(
                "cache needs at least one token and one channel",
            ));
        }
        Ok(Self {
            layout,
            n_tokens,
            head_dim,
            entries: VecDeque::new(),
        })
    }

    pub fn layout(&self) -> CacheLayout {
        self.layout
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn entries(&self) -> impl ExactSizeIterator<Item = &CacheEntry> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn steps(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.chunk_step).collect()
    }

    /// Number of cached rows that would enter the next context.
    pub fn alive_rows(&self) -> usize {
        self.entries.iter().map(CacheEntry::alive_count).sum()
    }

    /// True when some cached token is currently pruned.
    pub fn has_pruned(&self) -> bool {
        self.entries.iter().any(|e| e.alive.iter().any(|a| !a))
    }

    fn check_rows(&self, m: &ArrayView2<'_, f64>, rows: Option<usize>, what: &str) -> Result<()> {
        if m.ncols() != self.head_dim || rows.is_some_and(|r| m.nrows() != r) {
            return Err(Error::shape(format!(
                "{what} is {}x{}, expected {}x{}",
                m.nrows(),
                m.ncols(),
                rows.map_or_else(|| "*".to_string(), |r| r.to_string()),
                self.head_dim
            )));
        }
        Ok(())
    }

    /// Appends a chunk with every token alive, then evicts per the layout.
    pub fn append_chunk(
        &mut self,
        keys: Array2<f64>,
        values: Array2<f64>,
        step: usize,
    ) -> Result<()> {
        self.check_rows(&keys.view(), Some(self.n_tokens), "chunk keys")?;
        self.check_rows(&values.view(), Some(self.n_tokens), "chunk values")?;

        let anchor = match self.layout {
            CacheLayout::Rolling { .. } => false,
            CacheLayout::AnchorRecent { anchor, .. } => {
                self.entries.iter().filter(|e| e.anchor).count() < anchor
            }
        };
        self.entries.push_back(CacheEntry {
            chunk_step: step,
            keys,
            values,
            alive: vec![true; self.n_tokens],
            anchor,
        });

        match self.layout {
            CacheLayout::Rolling { window } => {
                while self.entries.len() > window {
                    self.entries.pop_front();
                }
            }
            CacheLayout::AnchorRecent { recent, .. } => {
                while self.entries.iter().filter(|e| !e.anchor).count() > recent {
                    let oldest = self
                        .entries
                        .iter()
                        .position(|e| !e.anchor)
                        .expect("non-anchor entry exists");
                    self.entries.remove(oldest);
                }
            }
        }
        Ok(())
    }

    /// Clears `alive[i]` wherever `mask` drops `i`, on every prunable entry.
    /// Anchor entries are left untouched.
    pub fn apply_prune(&mut self, mask: &PruneMask) -> Result<()> {
        if mask.len() != self.n_tokens {
            return Err(Error::shape(format!(
                "mask has {} positions, cache has {} tokens",
                mask.len(),
                self.n_tokens
            )));
        }
        for entry in self.entries.iter_mut().filter(|e| !e.anchor) {
            for (alive, &keep) in entry.alive.iter_mut().zip(mask.as_slice()) {
                *alive &= keep;
            }
        }
        Ok(())
    }

    /// `[current; alive cached rows]` in entry order.
    pub fn assemble_context(
        &self,
        k_curr: ArrayView2<'_, f64>,
        v_curr: ArrayView2<'_, f64>,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        self.check_rows(&k_curr, None, "current keys")?;
        self.check_rows(&v_curr, Some(k_curr.nrows()), "current values")?;

        let rows = k_curr.nrows() + self.alive_rows();
        let mut keys = Array2::zeros((rows, self.head_dim));
        let mut values = Array2::zeros((rows, self.head_dim));
        let n_curr = k_curr.nrows();
        keys.slice_mut(s![..n_curr, ..]).assign(&k_curr);
        values.slice_mut(s![..n_curr, ..]).assign(&v_curr);

        let mut r = n_curr;
        for entry in &self.entries {
            for (i, _) in entry.alive.iter().enumerate().filter(|(_, &a)| a) {
                keys.row_mut(r).assign(&entry.keys.row(i));
                values.row_mut(r).assign(&entry.values.row(i));
                r += 1;
            }
        }
        Ok((keys, values))
    }
}

/// `softmax(Q K^T / sqrt(d)) V` with `d = Q.ncols()`, one max-shifted softmax
/// per query row.
pub fn attention(
    q: ArrayView2<'_, f64>,
    k: ArrayView2<'_, f64>,
    v: ArrayView2<'_, f64>,
) -> Result<Array2<f64>> {
    if k.nrows() == 0 {
        return Err(Error::EmptyContext);
    }
    if q.ncols() != k.ncols() || k.nrows() != v.nrows() {
        return Err(Error::shape(format!(
            "attention got q {:?}, k {:?}, v {:?}",
            q.dim(),
            k.dim(),
            v.dim()
        )));
    }
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let mut out = Array2::zeros((q.nrows(), v.ncols()));
    let mut logits = vec![0.0; k.nrows()];
    for (qi, mut out_row) in q.rows().into_iter().zip(out.rows_mut()) {
        for (l, kj) in logits.iter_mut().zip(k.rows()) {
            *l = qi.dot(&kj) * scale;
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for l in logits.iter_mut() {
            *l = (*l - max).exp();
            total += *l;
        }
        for (w, vj) in logits.iter().zip(v.rows()) {
            out_row.scaled_add(w / total, &vj);
        }
    }
    Ok(out)
}
