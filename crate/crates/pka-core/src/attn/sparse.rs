//! Block-sparse attention kernels and the streaming-softmax merger.
//!
//! Image queries never materialize a dense score matrix. Each permitted
//! block (image-to-text, image-to-image, the positional diagonal against
//! each spatial condition, the keyword-gated block against each subject
//! condition) is reduced to a [`PartialAttention`] — per query row a running
//! max logit, running denominator, and running numerator vector — and the
//! partials are merged with the usual log-sum-exp rescaling. The merged
//! result equals one softmax over the union of each query's permitted keys,
//! which is exactly what the dense oracle computes.

use serde::{Deserialize, Serialize};

use crate::attn::AttentionInputs;
use crate::cost::CostMeter;
use crate::error::{Error, Result};
use crate::layout::{AttentionMaskSpec, SegmentId};
use crate::tensor::{dot, softmax_in_place, Scalar, Tensor};

/// How keyword-affinity logits are normalized into scores before
/// thresholding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskNormalization {
    /// Softmax over the image-token axis (default). Scores sum to 1, so the
    /// threshold is resolution-dependent: uniform affinity at N tokens gives
    /// every token a score of 1/N.
    SoftmaxOverImage,
    /// Each logit divided by the maximum logit. The best-matching token
    /// always scores 1, which keeps a fixed threshold meaningful across
    /// resolutions. Requires a positive maximum logit.
    RelativeToMax,
}

/// Binary activation over image tokens, computed from text-keyword affinity
/// at denoising step `step_index` and applied at step `step_index + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeywordMask {
    active: Vec<bool>,
    step_index: usize,
    epsilon: f64,
    normalization: MaskNormalization,
}

impl KeywordMask {
    pub fn from_active(
        active: Vec<bool>,
        step_index: usize,
        epsilon: f64,
        normalization: MaskNormalization,
    ) -> Self {
        KeywordMask {
            active,
            step_index,
            epsilon,
            normalization,
        }
    }

    pub fn all_active(n: usize, step_index: usize) -> Self {
        KeywordMask {
            active: vec![true; n],
            step_index,
            epsilon: 0.0,
            normalization: MaskNormalization::SoftmaxOverImage,
        }
    }

    pub fn len(&self) -> usize {
        self.active.len()
    }

    pub fn is_empty(&self) -> bool {
        self.active.is_empty()
    }

    pub fn is_active(&self, image_token: usize) -> bool {
        self.active[image_token]
    }

    pub fn active_count(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }

    pub fn step_index(&self) -> usize {
        self.step_index
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn normalization(&self) -> MaskNormalization {
        self.normalization
    }
}

/// Per-query-row streaming softmax state: running max logit `m`, running
/// denominator `z = sum exp(logit - m)`, and the exp-weighted numerator.
/// Merging two partials is associative and order-independent up to floating
/// point rounding.
#[derive(Debug, Clone)]
pub struct PartialAttention<T> {
    m: Vec<T>,
    z: Vec<T>,
    num: Tensor<T>,
}

impl<T: Scalar> PartialAttention<T> {
    /// Identity element: no keys seen for any row.
    pub fn empty(rows: usize, dim: usize) -> Self {
        PartialAttention {
            m: vec![T::neg_infinity(); rows],
            z: vec![T::zero(); rows],
            num: Tensor::zeros(&[rows, dim]),
        }
    }

    pub fn rows(&self) -> usize {
        self.m.len()
    }

    pub fn dim(&self) -> usize {
        self.num.cols()
    }

    /// Feed one key (its logit and value row) into query row `row`.
    pub fn push_key(&mut self, row: usize, logit: T, value: &[T]) {
        let num_row = self.num.row_mut(row);
        if logit <= self.m[row] {
            let e = (logit - self.m[row]).exp();
            self.z[row] = self.z[row] + e;
            for (acc, &v) in num_row.iter_mut().zip(value) {
                *acc = *acc + e * v;
            }
        } else {
            // New running max: rescale what we have, then add this key with
            // weight exp(0) = 1.
            let rescale = if self.z[row] > T::zero() {
                (self.m[row] - logit).exp()
            } else {
                T::zero()
            };
            self.z[row] = self.z[row] * rescale + T::one();
            for (acc, &v) in num_row.iter_mut().zip(value) {
                *acc = *acc * rescale + v;
            }
            self.m[row] = logit;
        }
    }

    /// Combine another partial over the same query rows into this one.
    pub fn merge(&mut self, other: &PartialAttention<T>) {
        assert_eq!(self.rows(), other.rows(), "merge over mismatched rows");
        assert_eq!(self.dim(), other.dim(), "merge over mismatched dims");
        for row in 0..self.rows() {
            if other.z[row] == T::zero() {
                continue; // empty contribution for this row
            }
            let m_new = self.m[row].max(other.m[row]);
            let a = if self.z[row] > T::zero() {
                (self.m[row] - m_new).exp()
            } else {
                T::zero()
            };
            let b = (other.m[row] - m_new).exp();
            self.z[row] = self.z[row] * a + other.z[row] * b;
            let (dst, src) = (self.num.row_mut(row), other.num.row(row));
            for (acc, &v) in dst.iter_mut().zip(src) {
                *acc = *acc * a + b * v;
            }
            self.m[row] = m_new;
        }
    }

    /// Final attention output: numerator / denominator per row. A row that
    /// never saw a key is a contract violation.
    pub fn finalize(&self) -> Result<Tensor<T>> {
        let mut out = self.num.clone();
        for row in 0..self.rows() {
            if self.z[row] == T::zero() {
                return Err(Error::EmptyQueryRow { row });
            }
            let inv = T::one() / self.z[row];
            for x in out.row_mut(row) {
                *x = *x * inv;
            }
        }
        debug_assert!(out.all_finite(), "partial finalize produced non-finite");
        Ok(out)
    }
}

/// Position-aligned attention: each image query meets exactly the condition
/// key at its own grid position. Cost Θ(N·d); only per-row running state is
/// allocated, never an N×N buffer.
pub fn paa<T: Scalar>(
    qx: &Tensor<T>,
    k_sp: &Tensor<T>,
    v_sp: &Tensor<T>,
    mut meter: Option<&mut CostMeter>,
) -> Result<PartialAttention<T>> {
    let (n, d) = (qx.rows(), qx.cols());
    if k_sp.shape() != qx.shape() || v_sp.shape() != qx.shape() {
        return Err(Error::Alignment(format!(
            "position-aligned attention needs congruent grids: q {:?}, k {:?}, v {:?}",
            qx.shape(),
            k_sp.shape(),
            v_sp.shape()
        )));
    }
    let scale = T::from_f64(1.0 / (d as f64).sqrt());
    if let Some(m) = meter.as_deref_mut() {
        m.alloc_scores(2 * n as u64); // running (m, z) per row
        m.add_pairs(n as u64, d);
    }
    let mut part = PartialAttention::empty(n, d);
    for i in 0..n {
        let logit = dot(qx.row(i), k_sp.row(i)) * scale;
        part.push_key(i, logit, v_sp.row(i));
    }
    if let Some(m) = meter.as_deref_mut() {
        m.free_scores(2 * n as u64);
    }
    Ok(part)
}

/// Dense partial for one unmasked block (image-to-text, image-to-image, or
/// first-step image-to-subject).
pub fn dense_partial<T: Scalar>(
    qx: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    mut meter: Option<&mut CostMeter>,
) -> Result<PartialAttention<T>> {
    let (n, d) = (qx.rows(), qx.cols());
    if k.cols() != d || v.cols() != d || k.rows() != v.rows() {
        return Err(Error::ShapeMismatch {
            op: "dense_partial",
            detail: format!("q {:?}, k {:?}, v {:?}", qx.shape(), k.shape(), v.shape()),
        });
    }
    let scale = T::from_f64(1.0 / (d as f64).sqrt());
    if let Some(m) = meter.as_deref_mut() {
        m.alloc_scores(2 * n as u64);
        m.add_pairs(n as u64 * k.rows() as u64, d);
    }
    let mut part = PartialAttention::empty(n, d);
    for i in 0..n {
        let qrow = qx.row(i);
        for j in 0..k.rows() {
            part.push_key(i, dot(qrow, k.row(j)) * scale, v.row(j));
        }
    }
    if let Some(m) = meter.as_deref_mut() {
        m.free_scores(2 * n as u64);
    }
    Ok(part)
}

/// Pre-threshold keyword-affinity scores over the image tokens: per head,
/// the summed dot products of image queries against the keyword text keys
/// (scaled by 1/sqrt(d)), averaged over heads, then normalized per `mode`.
pub fn ksa_scores<T: Scalar>(
    qx_heads: &[Tensor<T>],
    k_text_heads: &[Tensor<T>],
    keywords: &[usize],
    mode: MaskNormalization,
) -> Result<Vec<f64>> {
    if keywords.is_empty() {
        return Err(Error::InvalidParameter("keyword set must be nonempty".into()));
    }
    if qx_heads.is_empty() || qx_heads.len() != k_text_heads.len() {
        return Err(Error::ShapeMismatch {
            op: "ksa_scores",
            detail: "query/text head counts differ".into(),
        });
    }
    let n = qx_heads[0].rows();
    let d = qx_heads[0].cols();
    let scale = 1.0 / (d as f64).sqrt();
    let mut logits = vec![0.0f64; n];
    for (qx, kt) in qx_heads.iter().zip(k_text_heads) {
        for (i, logit) in logits.iter_mut().enumerate() {
            let qrow = qx.row(i);
            for &kw in keywords {
                *logit += dot(qrow, kt.row(kw)).to_f64() * scale;
            }
        }
    }
    let h = qx_heads.len() as f64;
    for logit in logits.iter_mut() {
        *logit /= h;
    }

    match mode {
        MaskNormalization::SoftmaxOverImage => {
            let mut t: Vec<f64> = logits.clone();
            softmax_in_place(&mut t);
            Ok(t)
        }
        MaskNormalization::RelativeToMax => {
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if max <= 0.0 {
                // A non-positive best affinity has no meaningful ratio scale.
                return Err(Error::DegenerateMask);
            }
            Ok(logits.iter().map(|&x| x / max).collect())
        }
    }
}

/// Binary semantic mask over image tokens: score >= epsilon. The mask is
/// computed at step `step_index` and is meant to gate the *next* step's
/// image-to-subject attention. A threshold of exactly zero disables
/// pruning (every token active). If no token clears the threshold the mask
/// is degenerate and the caller is expected to fall back to all-active.
pub fn ksa_mask<T: Scalar>(
    qx_heads: &[Tensor<T>],
    k_text_heads: &[Tensor<T>],
    keywords: &[usize],
    epsilon: f64,
    mode: MaskNormalization,
    step_index: usize,
) -> Result<KeywordMask> {
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::InvalidParameter(format!(
            "epsilon must be in [0, 1), got {epsilon}"
        )));
    }
    let n = qx_heads
        .first()
        .map(|t| t.rows())
        .ok_or_else(|| Error::InvalidParameter("no query heads".into()))?;
    if epsilon == 0.0 {
        return Ok(KeywordMask::from_active(vec![true; n], step_index, 0.0, mode));
    }
    let scores = ksa_scores(qx_heads, k_text_heads, keywords, mode)?;
    let active: Vec<bool> = scores.iter().map(|&s| s >= epsilon).collect();
    if active.iter().all(|&a| !a) {
        return Err(Error::DegenerateMask);
    }
    Ok(KeywordMask::from_active(active, step_index, epsilon, mode))
}

/// [`ksa_mask`] with the documented fallback policy: a degenerate mask
/// (nothing active) falls back to all-active for that step, so no query row
/// can lose its subject keys silently.
pub fn ksa_mask_or_all_active<T: Scalar>(
    qx_heads: &[Tensor<T>],
    k_text_heads: &[Tensor<T>],
    keywords: &[usize],
    epsilon: f64,
    mode: MaskNormalization,
    step_index: usize,
) -> KeywordMask {
    match ksa_mask(qx_heads, k_text_heads, keywords, epsilon, mode, step_index) {
        Ok(mask) => mask,
        Err(_) => KeywordMask::all_active(
            qx_heads.first().map(|t| t.rows()).unwrap_or(0),
            step_index,
        ),
    }
}

/// Keyword-scoped attention against one subject condition: active query
/// rows attend all subject keys, inactive rows contribute an empty partial.
/// Cost Θ(active · n_sj · d).
pub fn ksa<T: Scalar>(
    qx: &Tensor<T>,
    k_sj: &Tensor<T>,
    v_sj: &Tensor<T>,
    mask: &KeywordMask,
    mut meter: Option<&mut CostMeter>,
) -> Result<PartialAttention<T>> {
    let (n, d) = (qx.rows(), qx.cols());
    if mask.len() != n {
        return Err(Error::ShapeMismatch {
            op: "ksa",
            detail: format!("mask length {} != image tokens {n}", mask.len()),
        });
    }
    if k_sj.cols() != d || v_sj.cols() != d || k_sj.rows() != v_sj.rows() {
        return Err(Error::ShapeMismatch {
            op: "ksa",
            detail: format!("k {:?}, v {:?}", k_sj.shape(), v_sj.shape()),
        });
    }
    let scale = T::from_f64(1.0 / (d as f64).sqrt());
    if let Some(m) = meter.as_deref_mut() {
        m.alloc_scores(2 * n as u64);
        m.add_pairs(mask.active_count() as u64 * k_sj.rows() as u64, d);
    }
    let mut part = PartialAttention::empty(n, d);
    for i in 0..n {
        if !mask.is_active(i) {
            continue;
        }
        let qrow = qx.row(i);
        for j in 0..k_sj.rows() {
            part.push_key(i, dot(qrow, k_sj.row(j)) * scale, v_sj.row(j));
        }
    }
    if let Some(m) = meter.as_deref_mut() {
        m.free_scores(2 * n as u64);
    }
    Ok(part)
}

/// Log-sum-exp merge of partials over the same query rows, finalized to the
/// attention output. Equals a single-pass softmax over the union of keys.
pub fn merge_partials<T: Scalar>(parts: &[PartialAttention<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidParameter("merge_partials needs at least one partial".into()))?;
    let mut acc = first.clone();
    for p in &parts[1..] {
        acc.merge(p);
    }
    acc.finalize()
}

/// Full-sequence sparse engine over a block mask spec.
pub fn pka_attention<T: Scalar>(
    inp: &AttentionInputs<T>,
    spec: &AttentionMaskSpec,
    meter: Option<&mut CostMeter>,
) -> Result<Tensor<T>> {
    pka_attention_filtered(inp, spec, |_| true, meter)
}

/// Sparse engine restricted to query segments accepted by `query_filter`
/// (cached denoising steps skip the condition rows). Skipped rows are left
/// zero in the output.
pub fn pka_attention_filtered<T: Scalar>(
    inp: &AttentionInputs<T>,
    spec: &AttentionMaskSpec,
    query_filter: impl Fn(SegmentId) -> bool,
    mut meter: Option<&mut CostMeter>,
) -> Result<Tensor<T>> {
    let layout = spec.layout();
    let l = layout.total_len();
    if inp.seq_len() != l {
        return Err(Error::ShapeMismatch {
            op: "pka_attention",
            detail: format!("inputs have {} tokens, layout has {l}", inp.seq_len()),
        });
    }
    let (d, h) = (inp.head_dim(), inp.num_heads());
    let scale = inp.scale();
    let blocks = spec.blocks();
    let mut out = Tensor::zeros(&[l, h * d]);

    for head in 0..h {
        let (q, k, v) = (inp.q(head), inp.k(head), inp.v(head));
        for seg in layout.segments() {
            if !query_filter(seg) {
                continue;
            }
            let q_range = layout.segment_range(seg);
            let rows = q_range.len();
            let mut acc = PartialAttention::empty(rows, d);
            if let Some(m) = meter.as_deref_mut() {
                m.alloc_scores(2 * rows as u64);
            }
            for block in blocks.iter().filter(|b| b.q_seg == seg) {
                let mut pairs = 0u64;
                for (r, qi) in q_range.clone().enumerate() {
                    let qrow = q.row(qi);
                    spec.for_each_key(block, r, |kj| {
                        acc.push_key(r, dot(qrow, k.row(kj)) * scale, v.row(kj));
                        pairs += 1;
                    });
                }
                if let Some(m) = meter.as_deref_mut() {
                    m.add_pairs(pairs, d);
                }
            }
            let merged = acc.finalize()?;
            for (r, qi) in q_range.clone().enumerate() {
                out.row_mut(qi)[head * d..(head + 1) * d].copy_from_slice(merged.row(r));
            }
            if let Some(m) = meter.as_deref_mut() {
                m.free_scores(2 * rows as u64);
            }
        }
    }
    Ok(out)
}
