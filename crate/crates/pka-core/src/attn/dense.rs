//! Dense reference attention.
//!
//! [`mma_full`] is the concatenate-and-attend baseline: one joint softmax
//! over every token pair. [`masked_attention_oracle`] defines the canonical
//! semantics of every block mask: per query row, a softmax restricted to the
//! permitted keys with exact exclusion (skipped keys contribute exactly zero
//! probability), then the weighted sum of permitted value rows. The sparse
//! engine must match it; so must [`masked_attention_sentinel`], an
//! independent mechanism that materializes dense scores and masks with a
//! `-1e30` sentinel.

use crate::attn::AttentionInputs;
use crate::cost::CostMeter;
use crate::error::{Error, Result};
use crate::layout::{AttentionMaskSpec, SegmentId};
use crate::tensor::{dot, matmul, softmax_rows, Scalar, Tensor};

/// Full multi-modal attention: per head `softmax(Q K^T / sqrt(d)) V`, heads
/// concatenated along columns.
pub fn mma_full<T: Scalar>(inp: &AttentionInputs<T>) -> Tensor<T> {
    let (l, d, h) = (inp.seq_len(), inp.head_dim(), inp.num_heads());
    let scale = inp.scale();
    let mut out = Tensor::zeros(&[l, h * d]);
    for head in 0..h {
        let logits = matmul(inp.q(head), &inp.k(head).transpose())
            .expect("validated shapes")
            .scale(scale);
        let probs = softmax_rows(&logits);
        let head_out = matmul(&probs, inp.v(head)).expect("validated shapes");
        for i in 0..l {
            out.row_mut(i)[head * d..(head + 1) * d].copy_from_slice(head_out.row(i));
        }
    }
    out
}

/// Masked attention over an arbitrary per-pair predicate, exact exclusion.
/// This is the most general oracle; tests use it directly for permutation
/// checks with explicit boolean masks.
pub fn masked_attention_with<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    scale: T,
    permits: impl Fn(usize, usize) -> bool,
) -> Result<Tensor<T>> {
    let (l, d) = (q.rows(), q.cols());
    let keys = k.rows();
    let mut out = Tensor::zeros(&[l, d]);
    let mut logits: Vec<(usize, T)> = Vec::new();
    for i in 0..l {
        logits.clear();
        let qrow = q.row(i);
        for j in 0..keys {
            if permits(i, j) {
                logits.push((j, dot(qrow, k.row(j)) * scale));
            }
        }
        if logits.is_empty() {
            return Err(Error::EmptyQueryRow { row: i });
        }
        let m = logits
            .iter()
            .map(|&(_, x)| x)
            .fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for (_, x) in logits.iter_mut() {
            *x = (*x - m).exp();
            z = z + *x;
        }
        let orow = out.row_mut(i);
        for &(j, w) in logits.iter() {
            let p = w / z;
            let vrow = v.row(j);
            for c in 0..d {
                orow[c] = orow[c] + p * vrow[c];
            }
        }
    }
    Ok(out)
}

/// Canonical masked-attention semantics for a block mask spec: per head,
/// per query row, one joint softmax over the union of permitted keys.
pub fn masked_attention_oracle<T: Scalar>(
    inp: &AttentionInputs<T>,
    spec: &AttentionMaskSpec,
) -> Result<Tensor<T>> {
    expect_seq_len(inp, spec)?;
    let (l, d, h) = (inp.seq_len(), inp.head_dim(), inp.num_heads());
    let scale = inp.scale();
    let mut out = Tensor::zeros(&[l, h * d]);
    for head in 0..h {
        let head_out = masked_attention_with(inp.q(head), inp.k(head), inp.v(head), scale, |i, j| {
            spec.permits(i, j)
        })?;
        for i in 0..l {
            out.row_mut(i)[head * d..(head + 1) * d].copy_from_slice(head_out.row(i));
        }
    }
    Ok(out)
}

/// Dense-mask-mode implementation: materializes the full score matrix per
/// head, writes `-1e30` into excluded entries, and softmaxes whole rows.
pub fn masked_attention_sentinel<T: Scalar>(
    inp: &AttentionInputs<T>,
    spec: &AttentionMaskSpec,
    meter: Option<&mut CostMeter>,
) -> Result<Tensor<T>> {
    masked_attention_sentinel_filtered(inp, spec, |_| true, meter)
}

/// Sentinel-mode masked attention restricted to query segments accepted by
/// `query_filter` (used for cached-step cost runs). Rows of skipped
/// segments are left zero.
pub fn masked_attention_sentinel_filtered<T: Scalar>(
    inp: &AttentionInputs<T>,
    spec: &AttentionMaskSpec,
    query_filter: impl Fn(SegmentId) -> bool,
    mut meter: Option<&mut CostMeter>,
) -> Result<Tensor<T>> {
    expect_seq_len(inp, spec)?;
    let (l, d, h) = (inp.seq_len(), inp.head_dim(), inp.num_heads());
    let scale = inp.scale();
    let layout = spec.layout();
    let query_rows: Vec<usize> = layout
        .segments()
        .into_iter()
        .filter(|&s| query_filter(s))
        .flat_map(|s| layout.segment_range(s))
        .collect();

    let mut out = Tensor::zeros(&[l, h * d]);
    for head in 0..h {
        // The dense route materializes a full scores row per query: that is
        // the quadratic buffer the sparse engine exists to avoid.
        if let Some(m) = meter.as_deref_mut() {
            m.alloc_scores(query_rows.len() as u64 * l as u64);
            m.add_pairs(query_rows.len() as u64 * l as u64, d);
        }
        let mut scores = Tensor::zeros(&[query_rows.len(), l]);
        for (r, &i) in query_rows.iter().enumerate() {
            let qrow = inp.q(head).row(i);
            let srow = scores.row_mut(r);
            for j in 0..l {
                srow[j] = if spec.permits(i, j) {
                    dot(qrow, inp.k(head).row(j)) * scale
                } else {
                    T::NEG_SENTINEL
                };
            }
        }
        let probs = softmax_rows(&scores);
        let head_out = matmul(&probs, inp.v(head))?;
        for (r, &i) in query_rows.iter().enumerate() {
            out.row_mut(i)[head * d..(head + 1) * d].copy_from_slice(head_out.row(r));
        }
        if let Some(m) = meter.as_deref_mut() {
            m.free_scores(query_rows.len() as u64 * l as u64);
        }
    }
    Ok(out)
}

fn expect_seq_len<T: Scalar>(inp: &AttentionInputs<T>, spec: &AttentionMaskSpec) -> Result<()> {
    let l = spec.layout().total_len();
    if inp.seq_len() != l {
        return Err(Error::ShapeMismatch {
            op: "masked_attention",
            detail: format!("inputs have {} tokens, layout has {l}", inp.seq_len()),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{build_mask, Grid, MaskMode, ModalityLayout};
    use crate::rng::{normal_tensor, Rng};

    fn random_inputs(seed: u64, l: usize, h: usize, d: usize) -> AttentionInputs<f64> {
        let mut rng = Rng::new(seed);
        AttentionInputs::random(&mut rng, l, h, d)
    }

    /// Na\u{ef}ve two-loop softmax attention, written independently of the
    /// library tensor ops.
    fn brute_force_full(inp: &AttentionInputs<f64>) -> Vec<Vec<f64>> {
        let (l, d, h) = (inp.seq_len(), inp.head_dim(), inp.num_heads());
        let scale = 1.0 / (d as f64).sqrt();
        let mut out = vec![vec![0.0; h * d]; l];
        for head in 0..h {
            for i in 0..l {
                let mut ws = vec![0.0; l];
                let mut m = f64::NEG_INFINITY;
                for j in 0..l {
                    let mut s = 0.0;
                    for c in 0..d {
                        s += inp.q(head).at(i, c) * inp.k(head).at(j, c);
                    }
                    ws[j] = s * scale;
                    m = m.max(ws[j]);
                }
                let z: f64 = ws.iter().map(|x| (x - m).exp()).sum();
                for j in 0..l {
                    let p = (ws[j] - m).exp() / z;
                    for c in 0..d {
                        out[i][head * d + c] += p * inp.v(head).at(j, c);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn single_key_returns_value_row() {
        let inp = random_inputs(1, 1, 2, 4);
        let out = mma_full(&inp);
        for head in 0..2 {
            for c in 0..4 {
                assert!((out.at(0, head * 4 + c) - inp.v(head).at(0, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_keys_average_values() {
        let mut rng = Rng::new(2);
        let l = 5;
        let d = 3;
        let krow = normal_tensor::<f64>(&mut rng, &[1, d]);
        let mut k = Tensor::zeros(&[l, d]);
        for i in 0..l {
            k.row_mut(i).copy_from_slice(krow.row(0));
        }
        let q = normal_tensor::<f64>(&mut rng, &[l, d]);
        let v = normal_tensor::<f64>(&mut rng, &[l, d]);
        let inp = AttentionInputs::new(vec![q], vec![k], vec![v.clone()]).unwrap();
        let out = mma_full(&inp);
        for i in 0..l {
            for c in 0..d {
                let mean: f64 = (0..l).map(|j| v.at(j, c)).sum::<f64>() / l as f64;
                assert!((out.at(i, c) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matches_brute_force_two_loop() {
        let inp = random_inputs(3, 12, 1, 4);
        let out = mma_full(&inp);
        let want = brute_force_full(&inp);
        for i in 0..12 {
            for c in 0..4 {
                assert!((out.at(i, c) - want[i][c]).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn dense_full_spec_equals_mma_full() {
        let layout =
            ModalityLayout::with_congruent_spatial(3, Grid::new(2, 2), 1, vec![2], vec![0])
                .unwrap();
        let spec = build_mask(&layout, MaskMode::DenseFull, None).unwrap();
        let inp = random_inputs(4, layout.total_len(), 2, 4);
        let oracle = masked_attention_oracle(&inp, &spec).unwrap();
        let full = mma_full(&inp);
        assert!(oracle.max_abs_diff(&full) <= 1e-12);
    }

    #[test]
    fn lone_diagonal_block_copies_value_rows() {
        // Image rows see only their aligned spatial key: weight 1 on a
        // single key, so output rows equal the condition value rows.
        let layout =
            ModalityLayout::with_congruent_spatial(2, Grid::new(2, 2), 1, vec![], vec![0])
                .unwrap();
        let spec = build_mask(&layout, MaskMode::Pka, None).unwrap();
        let inp = random_inputs(5, layout.total_len(), 1, 4);
        let x = layout.segment_range(SegmentId::Image);
        let sp = layout.segment_range(SegmentId::Spatial(0));
        let out = masked_attention_with(inp.q(0), inp.k(0), inp.v(0), inp.scale(), |i, j| {
            // Strip the text/image blocks so the diagonal stands alone.
            x.contains(&i) && sp.contains(&j) && spec.permits(i, j)
                || (!x.contains(&i) && spec.permits(i, j))
        })
        .unwrap();
        for (off, i) in x.clone().enumerate() {
            for c in 0..4 {
                assert!((out.at(i, c) - inp.v(0).at(sp.start + off, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn permutation_equivariance() {
        let mut rng = Rng::new(9);
        let (l, d) = (6, 4);
        let q = normal_tensor::<f64>(&mut rng, &[l, d]);
        let k = normal_tensor::<f64>(&mut rng, &[l, d]);
        let v = normal_tensor::<f64>(&mut rng, &[l, d]);
        let scale = 1.0 / (d as f64).sqrt();
        let mask: Vec<Vec<bool>> = (0..l)
            .map(|i| (0..l).map(|j| (i + j) % 3 != 0 || i == j).collect())
            .collect();

        let base = masked_attention_with(&q, &k, &v, scale, |i, j| mask[i][j]).unwrap();

        // Permute keys/values together with mask columns.
        let perm: Vec<usize> = vec![3, 0, 5, 1, 4, 2];
        let mut kp = Tensor::zeros(&[l, d]);
        let mut vp = Tensor::zeros(&[l, d]);
        for (new, &old) in perm.iter().enumerate() {
            kp.row_mut(new).copy_from_slice(k.row(old));
            vp.row_mut(new).copy_from_slice(v.row(old));
        }
        let permuted =
            masked_attention_with(&q, &kp, &vp, scale, |i, j| mask[i][perm[j]]).unwrap();
        assert!(base.max_abs_diff(&permuted) <= 1e-12);
    }

    #[test]
    fn enlarging_mask_to_full_reproduces_mma() {
        let inp = random_inputs(7, 9, 2, 4);
        let out = masked_attention_with(inp.q(0), inp.k(0), inp.v(0), inp.scale(), |_, _| true)
            .unwrap();
        let full = mma_full(&inp);
        for i in 0..9 {
            for c in 0..4 {
                assert!((out.at(i, c) - full.at(i, c)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn sentinel_matches_exact_exclusion() {
        let layout =
            ModalityLayout::with_congruent_spatial(4, Grid::new(3, 3), 1, vec![3], vec![1])
                .unwrap();
        let spec = build_mask(&layout, MaskMode::Pka, None).unwrap();
        let inp64 = random_inputs(11, layout.total_len(), 2, 8);
        let inp32 = inp64.cast::<f32>();
        let oracle = masked_attention_oracle(&inp32, &spec).unwrap();
        let sentinel = masked_attention_sentinel(&inp32, &spec, None).unwrap();
        assert!(oracle.max_abs_diff(&sentinel) <= 1e-6);
    }

    #[test]
    fn empty_row_is_contract_violation() {
        let mut rng = Rng::new(1);
        let q = normal_tensor::<f64>(&mut rng, &[2, 2]);
        let k = normal_tensor::<f64>(&mut rng, &[2, 2]);
        let v = normal_tensor::<f64>(&mut rng, &[2, 2]);
        let err = masked_attention_with(&q, &k, &v, 1.0, |i, _| i != 0);
        assert!(matches!(err, Err(Error::EmptyQueryRow { row: 0 })));
    }

    #[test]
    fn attention_weights_sum_to_one_over_permitted_keys() {
        // Reconstruct weights by attending with one-hot values.
        let mut rng = Rng::new(21);
        let (l, d) = (6, 4);
        let q = normal_tensor::<f64>(&mut rng, &[l, d]);
        let k = normal_tensor::<f64>(&mut rng, &[l, d]);
        let mut v = Tensor::zeros(&[l, l]);
        for j in 0..l {
            v.set(j, j, 1.0);
        }
        let mask: Vec<Vec<bool>> = (0..l)
            .map(|i| (0..l).map(|j| i == j || j == (i + 1) % l).collect())
            .collect();
        let w = masked_attention_with(&q, &k, &v, 0.5, |i, j| mask[i][j]).unwrap();
        for i in 0..l {
            let total: f64 = w.row(i).iter().sum();
            assert!((total - 1.0).abs() <= 1e-12);
            for j in 0..l {
                if !mask[i][j] {
                    assert_eq!(w.at(i, j), 0.0, "excluded key got probability");
                }
            }
        }
    }
}
