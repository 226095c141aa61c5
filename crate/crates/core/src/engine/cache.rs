//! KV cache with exact surgery, and ancestry masks for tree batches.

use super::ModelConfig;
use crate::{Error, Result};

/// Per-layer key/value cache.
///
/// Every layer always holds the same number of entries; one entry per
/// accepted batch token, each carrying its original position id. Surgery
/// never recomputes values: `truncate` drops a suffix, `select` keeps an
/// increasing subset of the most recent batch, so a surviving entry is
/// bit-identical to the one produced when its token was first forwarded.
#[derive(Debug, Clone)]
pub struct KvCache {
    n_layers: usize,
    entry_dim: usize,
    max_positions: usize,
    positions: Vec<u32>,
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
}

impl KvCache {
    pub fn new(config: &ModelConfig) -> Self {
        KvCache {
            n_layers: config.n_layers,
            entry_dim: config.d_model,
            max_positions: config.max_positions,
            positions: Vec::new(),
            keys: vec![Vec::new(); config.n_layers],
            values: vec![Vec::new(); config.n_layers],
        }
    }

    #[must_use]
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    #[must_use]
    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Position ids of the cached entries, in insertion order.
    pub fn positions(&self) -> &[u32] {
        &self.positions
    }

    pub(super) fn check_compatible(&self, config: &ModelConfig) -> Result<()> {
        if self.n_layers != config.n_layers
            || self.entry_dim != config.d_model
            || self.max_positions != config.max_positions
        {
            return Err(Error::input("cache was built for a different model shape"));
        }
        Ok(())
    }

    pub(super) fn layer(&self, l: usize) -> (&[f32], &[f32]) {
        (&self.keys[l], &self.values[l])
    }

    pub(super) fn append(
        &mut self,
        positions: &[u32],
        batch_k: Vec<Vec<f32>>,
        batch_v: Vec<Vec<f32>>,
    ) {
        debug_assert_eq!(batch_k.len(), self.n_layers);
        self.positions.extend_from_slice(positions);
        for (l, (ks, vs)) in batch_k.into_iter().zip(batch_v).enumerate() {
            debug_assert_eq!(ks.len(), positions.len() * self.entry_dim);
            self.keys[l].extend(ks);
            self.values[l].extend(vs);
        }
    }

    /// Keeps the first `keep_len` entries and drops the rest.
    pub fn truncate(&mut self, keep_len: usize) -> Result<()> {
        if keep_len > self.len() {
            return Err(Error::input(format!(
                "cannot truncate cache of {} entries to {keep_len}",
                self.len()
            )));
        }
        self.positions.truncate(keep_len);
        for l in 0..self.n_layers {
            self.keys[l].truncate(keep_len * self.entry_dim);
            self.values[l].truncate(keep_len * self.entry_dim);
        }
        Ok(())
    }

    /// Keeps the prefix `[0, batch_start)` untouched and, from the batch
    /// region after it, only the entries at `batch_start + i` for each `i` in
    /// `indices` (strictly increasing). Used to retain the accepted path of a
    /// verified tree batch.
    pub fn select(&mut self, batch_start: usize, indices: &[usize]) -> Result<()> {
        if batch_start > self.len() {
            return Err(Error::input(format!(
                "batch start {batch_start} exceeds cache length {}",
                self.len()
            )));
        }
        let batch_len = self.len() - batch_start;
        for (i, &idx) in indices.iter().enumerate() {
            if idx >= batch_len {
                return Err(Error::input(format!(
                    "select index {idx} out of range for batch of {batch_len}"
                )));
            }
            if i > 0 && indices[i - 1] >= idx {
                return Err(Error::input("select indices must be strictly increasing"));
            }
        }

        let mut positions = Vec::with_capacity(batch_start + indices.len());
        positions.extend_from_slice(&self.positions[..batch_start]);
        for &idx in indices {
            positions.push(self.positions[batch_start + idx]);
        }
        self.positions = positions;

        let dim = self.entry_dim;
        for l in 0..self.n_layers {
            for buf in [&mut self.keys[l], &mut self.values[l]] {
                let mut next = Vec::with_capacity((batch_start + indices.len()) * dim);
                next.extend_from_slice(&buf[..batch_start * dim]);
                for &idx in indices {
                    let at = (batch_start + idx) * dim;
                    next.extend_from_slice(&buf[at..at + dim]);
                }
                *buf = next;
            }
        }
        Ok(())
    }
}

/// Attention admissibility over a flattened batch.
///
/// `allows(i, j)` is true iff j is i itself or an ancestor of i within the
/// batch; the cached prefix is always visible to every batch token. Both
/// constructors guarantee `allows(i, j) => j <= i`, so batches must be
/// topologically ordered (parents before children).
#[derive(Debug, Clone)]
pub struct AncestryMask {
    n: usize,
    bits: Vec<bool>,
}

impl AncestryMask {
    /// Linear-chain mask: every token sees all earlier batch tokens.
    pub fn chain(n: usize) -> Self {
        let mut bits = vec![false; n * n];
        for i in 0..n {
            for j in 0..=i {
                bits[i * n + j] = true;
            }
        }
        AncestryMask { n, bits }
    }

    /// Builds the transitive ancestor closure from per-node parent links.
    /// `parents[i]` must point at an earlier batch index.
    pub fn from_parents(parents: &[Option<usize>]) -> Result<Self> {
        let n = parents.len();
        let mut bits = vec![false; n * n];
        for i in 0..n {
            if let Some(p) = parents[i] {
                if p >= i {
                    return Err(Error::input(format!(
                        "node {i} lists parent {p}; parents must precede children"
                    )));
                }
                // inherit the parent's closed ancestor set
                let (head, tail) = bits.split_at_mut(i * n);
                tail[..n].copy_from_slice(&head[p * n..p * n + n]);
            }
            bits[i * n + i] = true;
        }
        Ok(AncestryMask { n, bits })
    }

    #[must_use]
    pub fn len(&self) -> usize {
        self.n
    }

    #[must_use]
    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline(always)]
    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.n + j]
    }
}
