//! Write-once condition KV cache.
//!
//! Condition tokens only self-attend, so their per-layer hidden states
//! never depend on the text/image branch or on the timestep. The branch is
//! evaluated once, its per-layer key/value projections are stored, and
//! every later denoising step reads them instead of recomputing. Because
//! the toy condition branch carries no timestep modulation, the reuse is
//! mathematically lossless (bit-exact, not approximate).

use crate::attn::sparse::{dense_partial, merge_partials};
use crate::attn::packed_to_heads;
use crate::error::{Error, Result};
use crate::tensor::{matmul, Scalar, Tensor};
use crate::toy::data::SyntheticSample;
use crate::toy::model::{copy_rows, rms_norm_plain, ToyDit};

/// Cached per-layer projections of one condition. Keys/values are stored
/// packed `n x (heads * d)`; per-head rows are exposed by slicing.
#[derive(Debug, Clone)]
pub struct CacheEntry<T> {
    k: Tensor<T>,
    v: Tensor<T>,
}

impl<T: Scalar> CacheEntry<T> {
    pub fn k(&self) -> &Tensor<T> {
        &self.k
    }

    pub fn v(&self) -> &Tensor<T> {
        &self.v
    }

    pub fn k_head(&self, head: usize, head_dim: usize, row: usize) -> &[T] {
        &self.k.row(row)[head * head_dim..(head + 1) * head_dim]
    }

    pub fn v_head(&self, head: usize, head_dim: usize, row: usize) -> &[T] {
        &self.v.row(row)[head * head_dim..(head + 1) * head_dim]
    }
}

/// Per-layer, per-condition cached K/V. Populated exactly once, immutable
/// afterward; concurrent reads are safe once population completes.
#[derive(Debug, Clone)]
pub struct ConditionCache<T> {
    entries: Vec<Vec<CacheEntry<T>>>,
    created_step: Option<usize>,
}

impl<T: Scalar> ConditionCache<T> {
    pub fn new() -> Self {
        ConditionCache {
            entries: Vec::new(),
            created_step: None,
        }
    }

    pub fn is_populated(&self) -> bool {
        self.created_step.is_some()
    }

    pub fn created_step(&self) -> Option<usize> {
        self.created_step
    }

    /// Evaluate the condition branch (self-attention only) layer by layer
    /// and store every layer's K/V projections. Errors if already populated.
    pub fn populate(
        &mut self,
        model: &ToyDit<T>,
        sample: &SyntheticSample<T>,
        step_index: usize,
    ) -> Result<()> {
        if self.is_populated() {
            return Err(Error::CachePopulated);
        }
        let layers = model.cfg.layers;
        let heads = model.cfg.heads;
        let conds = model.num_conditions();
        let mut entries: Vec<Vec<CacheEntry<T>>> = vec![Vec::new(); layers];

        for ci in 0..conds {
            let mut x = model.embed_condition(sample, ci);
            for (layer, lp) in model.params.layers.iter().enumerate() {
                let xn = rms_norm_plain(&x, &lp.norm1);
                let q = matmul(&xn, &lp.wq)?;
                let k = matmul(&xn, &lp.wk)?;
                let v = matmul(&xn, &lp.wv)?;
                entries[layer].push(CacheEntry {
                    k: k.clone(),
                    v: v.clone(),
                });

                // Condition self-attention, streaming arithmetic identical
                // to the full engine's single self block.
                let inputs = packed_to_heads(&q, &k, &v, heads)?;
                let d = model.cfg.head_dim;
                let mut attn = Tensor::zeros(&[x.rows(), heads * d]);
                for h in 0..heads {
                    let part = dense_partial(inputs.q(h), inputs.k(h), inputs.v(h), None)?;
                    let merged = merge_partials(&[part])?;
                    copy_cols(&mut attn, h * d, &merged);
                }
                x = x.add(&matmul(&attn, &lp.wo)?)?;
                x = model.mlp_block(layer, &x);
            }
        }

        self.entries = entries;
        self.created_step = Some(step_index);
        Ok(())
    }

    /// Stored (K, V) for `layer` and condition index (spatial conditions
    /// first, then subjects). Returns the stored tensors without mutation.
    pub fn lookup(&self, layer: usize, condition: usize) -> Result<&CacheEntry<T>> {
        self.entries
            .get(layer)
            .and_then(|row| row.get(condition))
            .ok_or(Error::CacheMiss { layer, condition })
    }

    pub fn num_layers(&self) -> usize {
        self.entries.len()
    }

    pub fn num_conditions(&self) -> usize {
        self.entries.first().map_or(0, Vec::len)
    }

    /// Bytes actually held by the cached tensors.
    pub fn memory_bytes(&self) -> usize {
        self.entries
            .iter()
            .flatten()
            .map(|e| (e.k.len() + e.v.len()) * T::BYTES)
            .sum()
    }

    /// Closed form: sum over layers and conditions of 2 * n * d * h * bytes.
    pub fn closed_form_bytes(layers: usize, cond_lens: &[usize], heads: usize, head_dim: usize) -> usize {
        layers
            * cond_lens
                .iter()
                .map(|&n| 2 * n * head_dim * heads * T::BYTES)
                .sum::<usize>()
    }
}

impl<T: Scalar> Default for ConditionCache<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn copy_cols<T: Scalar>(dst: &mut Tensor<T>, at: usize, src: &Tensor<T>) {
    for i in 0..src.rows() {
        let w = src.cols();
        dst.row_mut(i)[at..at + w].copy_from_slice(src.row(i));
    }
}
