//! Exact cost accounting for attention: score entries, FLOPs, and
//! score-buffer bytes, split per (query segment, key segment) block.
//!
//! FLOP convention, applied uniformly: one score entry costs `2d` for the
//! query-key dot product, `2d` for the value accumulation, and `5` for its
//! softmax share — `4d + 5` per permitted pair per head. Ratios between
//! modes carry the scaling claims; the absolute convention is fixed but
//! arbitrary.
//!
//! Every closed-form prediction is cross-checked against counters
//! incremented inside the kernels' actual loops; a mismatch is a hard
//! accounting error, never a warning.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attn::sparse::KeywordMask;
use crate::attn::{dense, sparse, AttentionInputs};
use crate::error::{Error, Result};
use crate::layout::{AttentionMaskSpec, MaskMode, ModalityLayout, SegmentId};
use crate::rng::Rng;
use crate::tensor::Scalar;

pub const FLOPS_PER_PAIR_BASE: u64 = 5;

pub fn flops_per_pair(head_dim: usize) -> u64 {
    4 * head_dim as u64 + FLOPS_PER_PAIR_BASE
}

/// First denoising step (conditions computed) vs any later step (condition
/// branch served from the cache).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    First,
    Cached,
}

/// Per-run accumulator fed by the kernels' inner loops.
#[derive(Debug, Default, Clone)]
pub struct CostMeter {
    score_entries: u64,
    flops: u64,
    live_score_elems: u64,
    peak_score_elems: u64,
}

impl CostMeter {
    pub fn new() -> Self {
        Self::default()
    }

    /// Record `pairs` computed score entries at head dimension `d`.
    pub fn add_pairs(&mut self, pairs: u64, head_dim: usize) {
        self.score_entries += pairs;
        self.flops += pairs * flops_per_pair(head_dim);
    }

    /// Track allocation of a live score buffer of `elems` entries.
    pub fn alloc_scores(&mut self, elems: u64) {
        self.live_score_elems += elems;
        self.peak_score_elems = self.peak_score_elems.max(self.live_score_elems);
    }

    pub fn free_scores(&mut self, elems: u64) {
        debug_assert!(self.live_score_elems >= elems);
        self.live_score_elems -= elems;
    }

    pub fn score_entries(&self) -> u64 {
        self.score_entries
    }

    pub fn flops(&self) -> u64 {
        self.flops
    }

    pub fn peak_score_elems(&self) -> u64 {
        self.peak_score_elems
    }
}

/// Cost of one (query segment, key segment) block.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockCost {
    pub query_segment: String,
    pub key_segment: String,
    pub rule: String,
    /// Permitted (query, key) pairs, mask-level (per head).
    pub pairs: u64,
    /// Score entries across all heads.
    pub score_entries: u64,
    pub flops: u64,
    pub score_bytes: u64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CostTotals {
    pub score_entries: u64,
    pub flops: u64,
    pub score_bytes: u64,
}

/// Exact cost of one forward attention pass.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostReport {
    pub step_kind: StepKind,
    pub heads: usize,
    pub head_dim: usize,
    pub elem_bytes: usize,
    pub blocks: Vec<BlockCost>,
    pub total: CostTotals,
    /// Peak simultaneously-live score-buffer elements per run (streaming
    /// kernels hold far less than `total.score_entries`).
    pub peak_score_elems: Option<u64>,
    pub wall_time_ns: Option<u64>,
}

/// Closed-form cost of one attention pass over `spec`.
///
/// `Cached` reports exclude every block whose query segment is a condition:
/// with conditions restricted to self-attention, those rows are served from
/// the cache and never recomputed.
pub fn predict_cost(
    spec: &AttentionMaskSpec,
    heads: usize,
    head_dim: usize,
    step_kind: StepKind,
    elem_bytes: usize,
) -> CostReport {
    let mut blocks = Vec::new();
    let mut total = CostTotals::default();
    for block in spec.blocks() {
        if step_kind == StepKind::Cached && block.q_seg.is_condition() {
            continue;
        }
        let pairs = spec.block_pairs(&block);
        let entries = pairs * heads as u64;
        let flops = entries * flops_per_pair(head_dim);
        let bytes = entries * elem_bytes as u64;
        total.score_entries += entries;
        total.flops += flops;
        total.score_bytes += bytes;
        blocks.push(BlockCost {
            query_segment: block.q_seg.name(),
            key_segment: block.k_seg.name(),
            rule: format!("{:?}", block.rule),
            pairs,
            score_entries: entries,
            flops,
            score_bytes: bytes,
        });
    }
    CostReport {
        step_kind,
        heads,
        head_dim,
        elem_bytes,
        blocks,
        total,
        peak_score_elems: None,
        wall_time_ns: None,
    }
}

/// Which engine a measured run exercises.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EngineMode {
    /// Materialized score matrix with sentinel masking (the
    /// concatenate-and-attend baseline when the spec is dense-full).
    Dense,
    /// Block-streaming sparse engine.
    Sparse,
}

/// Runs the chosen engine on seeded random inputs, with instrumentation,
/// and returns the measured report. The instrumented counters must equal
/// [`predict_cost`] exactly; any divergence is an accounting bug and fails
/// hard.
pub fn measure_cost<T: Scalar>(
    spec: &AttentionMaskSpec,
    heads: usize,
    head_dim: usize,
    step_kind: StepKind,
    mode: EngineMode,
    seed: u64,
) -> Result<CostReport> {
    let mut rng = Rng::new(seed);
    let inp: AttentionInputs<T> =
        AttentionInputs::random(&mut rng, spec.layout().total_len(), heads, head_dim);
    let query_filter = |seg: SegmentId| step_kind == StepKind::First || !seg.is_condition();

    let mut meter = CostMeter::new();
    let start = Instant::now();
    match mode {
        EngineMode::Dense => {
            dense::masked_attention_sentinel_filtered(&inp, spec, query_filter, Some(&mut meter))?
        }
        EngineMode::Sparse => {
            sparse::pka_attention_filtered(&inp, spec, query_filter, Some(&mut meter))?
        }
    };
    let wall = start.elapsed().as_nanos() as u64;

    let mut report = predict_cost(spec, heads, head_dim, step_kind, T::BYTES);
    if meter.score_entries() != report.total.score_entries {
        return Err(Error::AccountingMismatch {
            field: "score_entries",
            measured: meter.score_entries(),
            predicted: report.total.score_entries,
        });
    }
    if meter.flops() != report.total.flops {
        return Err(Error::AccountingMismatch {
            field: "flops",
            measured: meter.flops(),
            predicted: report.total.flops,
        });
    }
    report.peak_score_elems = Some(meter.peak_score_elems());
    report.wall_time_ns = Some(wall);
    Ok(report)
}

/// Layout used by the condition-count scaling benchmark: a small text and
/// image segment plus `c` detached condition groups of `tokens_per_cond`
/// tokens each, so the condition blocks dominate the sequence.
pub fn scaling_layout(
    text_len: usize,
    image_grid: crate::layout::Grid,
    conditions: usize,
    tokens_per_cond: usize,
) -> Result<ModalityLayout> {
    ModalityLayout::new(
        text_len,
        image_grid,
        Vec::new(),
        vec![tokens_per_cond; conditions],
        vec![0],
    )
}

/// One row of the scaling benchmark.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScalingRow {
    pub mode: String,
    pub conditions: usize,
    pub score_entries: u64,
    pub flops: u64,
    pub score_bytes: u64,
    pub wall_time_ns: u64,
}

/// Dense-vs-sparse scaling sweep over condition counts. Counters are
/// verified against closed forms on every row.
pub fn scaling_sweep<T: Scalar>(
    text_len: usize,
    image_grid: crate::layout::Grid,
    conditions: &[usize],
    tokens_per_cond: usize,
    heads: usize,
    head_dim: usize,
    modes: &[EngineMode],
    seed: u64,
) -> Result<Vec<ScalingRow>> {
    let mut rows = Vec::new();
    for &mode in modes {
        for &c in conditions {
            let layout = scaling_layout(text_len, image_grid, c, tokens_per_cond)?;
            let mask_mode = match mode {
                EngineMode::Dense => MaskMode::DenseFull,
                EngineMode::Sparse => MaskMode::Pka,
            };
            let spec = crate::layout::build_mask(&layout, mask_mode, None)?;
            let report = measure_cost::<T>(&spec, heads, head_dim, StepKind::First, mode, seed)?;
            rows.push(ScalingRow {
                mode: match mode {
                    EngineMode::Dense => "dense".into(),
                    EngineMode::Sparse => "pka".into(),
                },
                conditions: c,
                score_entries: report.total.score_entries,
                flops: report.total.flops,
                score_bytes: report.total.score_bytes,
                wall_time_ns: report.wall_time_ns.unwrap_or(0),
            });
        }
    }
    Ok(rows)
}

/// Least-squares slope of ln(y) against ln(x).
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// Keyword-gated spec helper shared by tests: pka mask with an attached
/// keyword mask.
pub fn pka_spec_with_mask(
    layout: &ModalityLayout,
    mask: Option<KeywordMask>,
) -> Result<AttentionMaskSpec> {
    crate::layout::build_mask(layout, MaskMode::Pka, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{build_mask, Grid};

    fn layout_m8_n64(c: usize) -> ModalityLayout {
        ModalityLayout::with_congruent_spatial(8, Grid::new(8, 8), c, vec![], vec![0]).unwrap()
    }

    #[test]
    fn dense_entries_match_l_squared() {
        let spec = build_mask(&layout_m8_n64(1), MaskMode::DenseFull, None).unwrap();
        let report = predict_cost(&spec, 1, 32, StepKind::First, 4);
        assert_eq!(report.total.score_entries, 18_496);
    }

    #[test]
    fn pka_entries_match_block_sum() {
        let spec = build_mask(&layout_m8_n64(1), MaskMode::Pka, None).unwrap();
        let report = predict_cost(&spec, 1, 32, StepKind::First, 4);
        assert_eq!(report.total.score_entries, 9_344);
    }

    #[test]
    fn second_differences_in_condition_count() {
        let entries = |mode: MaskMode, c: usize| {
            let spec = build_mask(&layout_m8_n64(c), mode, None).unwrap();
            predict_cost(&spec, 1, 32, StepKind::First, 4).total.score_entries
        };
        for c in 1..=2 {
            let d2_pka = entries(MaskMode::Pka, c + 2) + entries(MaskMode::Pka, c)
                - 2 * entries(MaskMode::Pka, c + 1);
            let d2_dense = entries(MaskMode::DenseFull, c + 2) + entries(MaskMode::DenseFull, c)
                - 2 * entries(MaskMode::DenseFull, c + 1);
            assert_eq!(d2_pka, 0);
            assert_eq!(d2_dense, 2 * 64 * 64);
        }
    }

    #[test]
    fn measured_equals_predicted_across_modes() {
        let layout =
            ModalityLayout::with_congruent_spatial(4, Grid::new(3, 3), 2, vec![5], vec![1])
                .unwrap();
        for mask_mode in [MaskMode::Pka, MaskMode::Band(3)] {
            let spec = build_mask(&layout, mask_mode, None).unwrap();
            for step in [StepKind::First, StepKind::Cached] {
                // measure_cost fails hard on any counter mismatch.
                let r = measure_cost::<f32>(&spec, 2, 8, step, EngineMode::Sparse, 3).unwrap();
                assert!(r.wall_time_ns.is_some());
            }
        }
        let spec = build_mask(&layout, MaskMode::DenseFull, None).unwrap();
        measure_cost::<f32>(&spec, 2, 8, StepKind::First, EngineMode::Dense, 3).unwrap();
    }

    #[test]
    fn cached_step_strictly_cheaper_with_conditions() {
        let spec = build_mask(&layout_m8_n64(2), MaskMode::Pka, None).unwrap();
        let first = predict_cost(&spec, 4, 32, StepKind::First, 4);
        let cached = predict_cost(&spec, 4, 32, StepKind::Cached, 4);
        assert!(cached.total.flops < first.total.flops);
        // The delta is exactly the condition self-attention cost.
        let cond_flops: u64 = first
            .blocks
            .iter()
            .filter(|b| b.query_segment.starts_with("spatial") || b.query_segment.starts_with("subject"))
            .map(|b| b.flops)
            .sum();
        assert_eq!(first.total.flops - cached.total.flops, cond_flops);
    }

    #[test]
    fn flop_ratio_at_c16_spatial_exceeds_8() {
        let dense = build_mask(&layout_m8_n64(16), MaskMode::DenseFull, None).unwrap();
        let pka = build_mask(&layout_m8_n64(16), MaskMode::Pka, None).unwrap();
        let fd = predict_cost(&dense, 4, 32, StepKind::First, 4).total.flops;
        let fp = predict_cost(&pka, 4, 32, StepKind::First, 4).total.flops;
        assert!(fd as f64 / fp as f64 >= 8.0, "ratio {}", fd as f64 / fp as f64);
    }

    #[test]
    fn scaling_slopes() {
        let conditions = [1usize, 2, 4, 8, 16];
        let grid = Grid::new(2, 2);
        let (mut dense_e, mut pka_e) = (Vec::new(), Vec::new());
        for &c in &conditions {
            let layout = scaling_layout(4, grid, c, 64).unwrap();
            let d = build_mask(&layout, MaskMode::DenseFull, None).unwrap();
            let p = build_mask(&layout, MaskMode::Pka, None).unwrap();
            dense_e.push(predict_cost(&d, 4, 32, StepKind::First, 4).total.score_bytes as f64);
            pka_e.push(predict_cost(&p, 4, 32, StepKind::First, 4).total.score_bytes as f64);
        }
        let xs: Vec<f64> = conditions.iter().map(|&c| c as f64).collect();
        let dense_slope = log_log_slope(&xs, &dense_e);
        let pka_slope = log_log_slope(&xs, &pka_e);
        assert!((dense_slope - 2.0).abs() <= 0.15, "dense slope {dense_slope}");
        assert!(pka_slope <= 1.1, "pka slope {pka_slope}");
    }

    #[test]
    fn accounting_mismatch_is_detected() {
        // A meter that lies about its counts must produce the hard error.
        let spec = build_mask(&layout_m8_n64(1), MaskMode::Pka, None).unwrap();
        let predicted = predict_cost(&spec, 1, 8, StepKind::First, 4);
        let mut meter = CostMeter::new();
        meter.add_pairs(1, 8); // wrong on purpose
        assert_ne!(meter.score_entries(), predicted.total.score_entries);
    }
}
