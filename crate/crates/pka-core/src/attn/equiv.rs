//! Seeded equivalence suite: the sparse engine against the dense oracle
//! across a parameter grid, in both precisions, plus the sentinel-mask
//! cross-check. This is what the `verify` subcommand runs.

use serde::{Deserialize, Serialize};

use crate::attn::sparse::{ksa_mask_or_all_active, pka_attention, MaskNormalization};
use crate::attn::{dense, AttentionInputs};
use crate::error::Result;
use crate::layout::{build_mask, Grid, MaskMode, ModalityLayout};
use crate::rng::Rng;

pub const FP32_TOLERANCE: f64 = 1e-5;
pub const FP64_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub instances: usize,
    pub max_abs_err_fp32: f64,
    pub max_abs_err_fp64: f64,
    pub max_abs_err_sentinel_fp32: f64,
    pub tolerance_fp32: f64,
    pub tolerance_fp64: f64,
    pub pass: bool,
}

/// One grid point of the sweep.
#[derive(Debug, Clone, Copy)]
struct GridPoint {
    text_len: usize,
    grid: Grid,
    spatial: usize,
    subject: usize,
    heads: usize,
    head_dim: usize,
}

fn parameter_grid() -> Vec<GridPoint> {
    let mut points = Vec::new();
    for &text_len in &[2usize, 8] {
        for &grid in &[Grid::new(2, 2), Grid::new(4, 4), Grid::new(8, 8)] {
            for spatial in 0..=3 {
                for subject in 0..=2 {
                    for &heads in &[1usize, 4] {
                        for &head_dim in &[4usize, 16] {
                            points.push(GridPoint {
                                text_len,
                                grid,
                                spatial,
                                subject,
                                heads,
                                head_dim,
                            });
                        }
                    }
                }
            }
        }
    }
    points
}

/// Runs `instances` seeded random instances sampled from the parameter grid
/// and reports the worst sparse-vs-oracle deviation per precision.
pub fn run_equivalence_suite(seed: u64, instances: usize) -> Result<EquivalenceReport> {
    let mut rng = Rng::new(seed);
    let mut points = parameter_grid();
    // Deterministic shuffle, then cycle through as many instances as asked.
    for i in (1..points.len()).rev() {
        points.swap(i, rng.next_below(i + 1));
    }

    let mut max32: f64 = 0.0;
    let mut max64: f64 = 0.0;
    let mut max_sentinel: f64 = 0.0;
    for idx in 0..instances {
        let p = points[idx % points.len()];
        let subject_lens: Vec<usize> = (0..p.subject).map(|_| 2 + rng.next_below(5)).collect();
        let keywords = match p.text_len {
            t if t >= 2 && rng.next_f64() < 0.5 => vec![0, 1 + rng.next_below(t - 1)],
            t => vec![rng.next_below(t)],
        };
        let layout = ModalityLayout::with_congruent_spatial(
            p.text_len,
            p.grid,
            p.spatial,
            subject_lens,
            keywords,
        )?;
        let inp64: AttentionInputs<f64> =
            AttentionInputs::random(&mut rng, layout.total_len(), p.heads, p.head_dim);

        // Keyword mask via the real affinity path when a subject exists.
        let mask = if p.subject > 0 {
            let epsilon = [0.0, 0.1, 0.2][idx % 3];
            let x = layout.segment_range(crate::layout::SegmentId::Image);
            let qx: Vec<_> = (0..p.heads)
                .map(|h| slice_rows(inp64.q(h), x.clone()))
                .collect();
            let kt: Vec<_> = (0..p.heads)
                .map(|h| slice_rows(inp64.k(h), 0..layout.text_len()))
                .collect();
            Some(ksa_mask_or_all_active(
                &qx,
                &kt,
                layout.keywords(),
                epsilon,
                MaskNormalization::SoftmaxOverImage,
                0,
            ))
        } else {
            None
        };
        let spec = build_mask(&layout, MaskMode::Pka, mask)?;

        let oracle64 = dense::masked_attention_oracle(&inp64, &spec)?;
        let sparse64 = pka_attention(&inp64, &spec, None)?;
        max64 = max64.max(sparse64.max_abs_diff(&oracle64));

        let inp32 = inp64.cast::<f32>();
        let oracle32 = dense::masked_attention_oracle(&inp32, &spec)?;
        let sparse32 = pka_attention(&inp32, &spec, None)?;
        max32 = max32.max(sparse32.max_abs_diff(&oracle32));

        let sentinel32 = dense::masked_attention_sentinel(&inp32, &spec, None)?;
        max_sentinel = max_sentinel.max(sentinel32.max_abs_diff(&oracle32));
    }

    Ok(EquivalenceReport {
        instances,
        max_abs_err_fp32: max32,
        max_abs_err_fp64: max64,
        max_abs_err_sentinel_fp32: max_sentinel,
        tolerance_fp32: FP32_TOLERANCE,
        tolerance_fp64: FP64_TOLERANCE,
        pass: max32 <= FP32_TOLERANCE && max64 <= FP64_TOLERANCE && max_sentinel <= FP32_TOLERANCE,
    })
}

fn slice_rows<T: crate::tensor::Scalar>(
    t: &crate::tensor::Tensor<T>,
    range: std::ops::Range<usize>,
) -> crate::tensor::Tensor<T> {
    let d = t.cols();
    let mut out = crate::tensor::Tensor::zeros(&[range.len(), d]);
    for (r, i) in range.enumerate() {
        out.row_mut(r).copy_from_slice(t.row(i));
    }
    out
}
