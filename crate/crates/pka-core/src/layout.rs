//! Token-sequence layout and block-structured attention masks.
//!
//! The concatenated sequence is `[T; X; SP_1..SP_c; SJ_1..SJ_s]`: text,
//! noisy image, position-aligned spatial conditions (one per control map,
//! congruent with the image grid), and subject conditions (free-length token
//! sets). Masks are declared per (query segment, key segment) block and
//! evaluated either as a per-pair predicate (the oracle route) or as per-row
//! key enumerations (the sparse engine route).

use serde::{Deserialize, Serialize};

use crate::attn::sparse::KeywordMask;
use crate::error::{Error, Result};

/// 2-D token grid, row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    pub h: usize,
    pub w: usize,
}

impl Grid {
    pub fn new(h: usize, w: usize) -> Self {
        Grid { h, w }
    }

    pub fn len(&self) -> usize {
        self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pos(&self, idx: usize) -> (usize, usize) {
        (idx / self.w, idx % self.w)
    }

    pub fn chebyshev(&self, a: usize, b: usize) -> usize {
        let (ar, ac) = self.pos(a);
        let (br, bc) = self.pos(b);
        ar.abs_diff(br).max(ac.abs_diff(bc))
    }
}

/// One segment of the concatenated sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SegmentId {
    Text,
    Image,
    Spatial(usize),
    Subject(usize),
}

impl SegmentId {
    pub fn is_condition(&self) -> bool {
        matches!(self, SegmentId::Spatial(_) | SegmentId::Subject(_))
    }

    pub fn name(&self) -> String {
        match self {
            SegmentId::Text => "text".into(),
            SegmentId::Image => "image".into(),
            SegmentId::Spatial(j) => format!("spatial{j}"),
            SegmentId::Subject(j) => format!("subject{j}"),
        }
    }
}

/// Segment map of the token sequence with spatial coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityLayout {
    text_len: usize,
    image_grid: Grid,
    spatial_grids: Vec<Grid>,
    subject_lens: Vec<usize>,
    keyword_indices: Vec<usize>,
}

impl ModalityLayout {
    /// Validates congruence of every spatial-condition grid with the image
    /// grid and the keyword set (nonempty, inside the text segment).
    pub fn new(
        text_len: usize,
        image_grid: Grid,
        spatial_grids: Vec<Grid>,
        subject_lens: Vec<usize>,
        keyword_indices: Vec<usize>,
    ) -> Result<Self> {
        if text_len == 0 || image_grid.len() == 0 {
            return Err(Error::InvalidParameter(
                "text and image segments must be nonempty".into(),
            ));
        }
        for (j, g) in spatial_grids.iter().enumerate() {
            if *g != image_grid {
                return Err(Error::Alignment(format!(
                    "spatial condition {j} grid {}x{} != image grid {}x{}",
                    g.h, g.w, image_grid.h, image_grid.w
                )));
            }
        }
        if subject_lens.iter().any(|&n| n == 0) {
            return Err(Error::InvalidParameter("empty subject condition".into()));
        }
        let mut keywords = keyword_indices;
        keywords.sort_unstable();
        keywords.dedup();
        if keywords.is_empty() {
            return Err(Error::InvalidParameter("keyword set must be nonempty".into()));
        }
        if keywords.iter().any(|&k| k >= text_len) {
            return Err(Error::InvalidParameter(format!(
                "keyword index out of text range [0, {text_len})"
            )));
        }
        Ok(ModalityLayout {
            text_len,
            image_grid,
            spatial_grids,
            subject_lens,
            keyword_indices: keywords,
        })
    }

    /// Layout with `c` spatial conditions congruent to the image grid.
    pub fn with_congruent_spatial(
        text_len: usize,
        image_grid: Grid,
        spatial_conds: usize,
        subject_lens: Vec<usize>,
        keyword_indices: Vec<usize>,
    ) -> Result<Self> {
        ModalityLayout::new(
            text_len,
            image_grid,
            vec![image_grid; spatial_conds],
            subject_lens,
            keyword_indices,
        )
    }

    pub fn text_len(&self) -> usize {
        self.text_len
    }

    pub fn image_grid(&self) -> Grid {
        self.image_grid
    }

    pub fn image_len(&self) -> usize {
        self.image_grid.len()
    }

    pub fn num_spatial(&self) -> usize {
        self.spatial_grids.len()
    }

    pub fn num_subject(&self) -> usize {
        self.subject_lens.len()
    }

    pub fn subject_len(&self, j: usize) -> usize {
        self.subject_lens[j]
    }

    pub fn keywords(&self) -> &[usize] {
        &self.keyword_indices
    }

    pub fn total_len(&self) -> usize {
        self.text_len
            + self.image_len()
            + self.num_spatial() * self.image_len()
            + self.subject_lens.iter().sum::<usize>()
    }

    /// All segments in sequence order.
    pub fn segments(&self) -> Vec<SegmentId> {
        let mut out = vec![SegmentId::Text, SegmentId::Image];
        out.extend((0..self.num_spatial()).map(SegmentId::Spatial));
        out.extend((0..self.num_subject()).map(SegmentId::Subject));
        out
    }

    pub fn segment_len(&self, seg: SegmentId) -> usize {
        match seg {
            SegmentId::Text => self.text_len,
            SegmentId::Image => self.image_len(),
            SegmentId::Spatial(_) => self.image_len(),
            SegmentId::Subject(j) => self.subject_lens[j],
        }
    }

    pub fn segment_start(&self, seg: SegmentId) -> usize {
        let n = self.image_len();
        match seg {
            SegmentId::Text => 0,
            SegmentId::Image => self.text_len,
            SegmentId::Spatial(j) => self.text_len + n + j * n,
            SegmentId::Subject(j) => {
                self.text_len
                    + n
                    + self.num_spatial() * n
                    + self.subject_lens[..j].iter().sum::<usize>()
            }
        }
    }

    pub fn segment_range(&self, seg: SegmentId) -> std::ops::Range<usize> {
        let s = self.segment_start(seg);
        s..s + self.segment_len(seg)
    }

    /// Segment containing absolute token index, plus the in-segment offset.
    pub fn segment_of(&self, token: usize) -> (SegmentId, usize) {
        debug_assert!(token < self.total_len());
        let mut start = 0;
        for seg in self.segments() {
            let len = self.segment_len(seg);
            if token < start + len {
                return (seg, token - start);
            }
            start += len;
        }
        unreachable!("token index out of range")
    }
}

/// Attention rule for one (query segment, key segment) block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockRule {
    /// No query-key pairs.
    None,
    /// Every query attends every key of the block.
    All,
    /// Query at grid position i attends exactly the key at position i.
    Diagonal,
    /// Keys within grid-Chebyshev `radius` of the query position.
    Band { radius: usize },
    /// Whole query rows toggled by the keyword mask; active rows attend all
    /// keys of the block, inactive rows none.
    RowGated,
}

/// Mask family selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Eq-style concatenate-and-attend baseline: every pair permitted.
    DenseFull,
    /// Decomposed attention: text and image attend each other fully, image
    /// meets spatial conditions on the positional diagonal and subject
    /// conditions through keyword row-gating, conditions self-attend only.
    Pka,
    /// Like `Pka` but image-to-spatial uses a sliding window of odd width
    /// `k` (grid-Chebyshev radius (k-1)/2) instead of the strict diagonal.
    Band(usize),
}

/// Declarative block-structured mask over a [`ModalityLayout`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionMaskSpec {
    layout: ModalityLayout,
    mode: MaskMode,
    rules: Vec<Vec<BlockRule>>,
    keyword_mask: Option<KeywordMask>,
}

/// Builds the mask for `mode`. Attaching a [`KeywordMask`] (length N,
/// computed at the previous denoising step) turns every image-to-subject
/// block into a row-gated block; without one those blocks run dense, which
/// is the first-step behavior.
pub fn build_mask(
    layout: &ModalityLayout,
    mode: MaskMode,
    keyword_mask: Option<KeywordMask>,
) -> Result<AttentionMaskSpec> {
    if let MaskMode::Band(k) = mode {
        if k < 1 || k % 2 == 0 {
            return Err(Error::InvalidParameter(format!(
                "band window must be odd and >= 1, got {k}"
            )));
        }
    }
    if let Some(m) = &keyword_mask {
        if m.len() != layout.image_len() {
            return Err(Error::ShapeMismatch {
                op: "build_mask",
                detail: format!(
                    "keyword mask length {} != image tokens {}",
                    m.len(),
                    layout.image_len()
                ),
            });
        }
    }

    let segs = layout.segments();
    let mut rules = vec![vec![BlockRule::None; segs.len()]; segs.len()];
    for (qi, &qs) in segs.iter().enumerate() {
        for (ki, &ks) in segs.iter().enumerate() {
            rules[qi][ki] = match mode {
                MaskMode::DenseFull => BlockRule::All,
                MaskMode::Pka | MaskMode::Band(_) => pka_rule(qs, ks, mode, keyword_mask.is_some()),
            };
        }
    }

    let spec = AttentionMaskSpec {
        layout: layout.clone(),
        mode,
        rules,
        keyword_mask,
    };
    spec.check_no_empty_rows()?;
    Ok(spec)
}

fn pka_rule(qs: SegmentId, ks: SegmentId, mode: MaskMode, gated: bool) -> BlockRule {
    use SegmentId::*;
    match (qs, ks) {
        // Text keeps full bidirectional attention with itself and the image.
        (Text, Text) | (Text, Image) | (Image, Text) | (Image, Image) => BlockRule::All,
        // Image meets each spatial condition on the positional diagonal
        // (or a grid band in sliding-window mode).
        (Image, Spatial(_)) => match mode {
            MaskMode::Band(k) => BlockRule::Band { radius: (k - 1) / 2 },
            _ => BlockRule::Diagonal,
        },
        // Image meets each subject condition through keyword gating once a
        // mask exists; dense on the first step.
        (Image, Subject(_)) => {
            if gated {
                BlockRule::RowGated
            } else {
                BlockRule::All
            }
        }
        // Conditions only self-attend, which is what makes their K/V cacheable.
        (Spatial(a), Spatial(b)) if a == b => BlockRule::All,
        (Subject(a), Subject(b)) if a == b => BlockRule::All,
        _ => BlockRule::None,
    }
}

impl AttentionMaskSpec {
    pub fn layout(&self) -> &ModalityLayout {
        &self.layout
    }

    pub fn mode(&self) -> MaskMode {
        self.mode
    }

    pub fn keyword_mask(&self) -> Option<&KeywordMask> {
        self.keyword_mask.as_ref()
    }

    pub fn rule(&self, qs: SegmentId, ks: SegmentId) -> BlockRule {
        let segs = self.layout.segments();
        let qi = segs.iter().position(|&s| s == qs).expect("query segment");
        let ki = segs.iter().position(|&s| s == ks).expect("key segment");
        self.rules[qi][ki]
    }

    /// All non-empty blocks in canonical (query, key) segment order.
    pub fn blocks(&self) -> Vec<MaskBlock> {
        let segs = self.layout.segments();
        let mut out = Vec::new();
        for (qi, &qs) in segs.iter().enumerate() {
            for (ki, &ks) in segs.iter().enumerate() {
                let rule = self.rules[qi][ki];
                if rule != BlockRule::None {
                    out.push(MaskBlock {
                        q_seg: qs,
                        k_seg: ks,
                        q_range: self.layout.segment_range(qs),
                        k_range: self.layout.segment_range(ks),
                        rule,
                    });
                }
            }
        }
        out
    }

    /// Per-pair permission predicate over absolute token indices. This is
    /// the independent route the dense oracle consumes; the sparse engine
    /// instead walks [`Self::for_each_key`] block by block.
    pub fn permits(&self, query: usize, key: usize) -> bool {
        let (qs, qo) = self.layout.segment_of(query);
        let (ks, ko) = self.layout.segment_of(key);
        match self.rule(qs, ks) {
            BlockRule::None => false,
            BlockRule::All => true,
            BlockRule::Diagonal => qo == ko,
            BlockRule::Band { radius } => self.layout.image_grid().chebyshev(qo, ko) <= radius,
            BlockRule::RowGated => self
                .keyword_mask
                .as_ref()
                .map(|m| m.is_active(qo))
                .unwrap_or(true),
        }
    }

    /// Enumerates the permitted absolute key indices of `block` for the
    /// query at in-segment offset `q_off`.
    pub fn for_each_key(&self, block: &MaskBlock, q_off: usize, mut f: impl FnMut(usize)) {
        match block.rule {
            BlockRule::None => {}
            BlockRule::All => {
                for k in block.k_range.clone() {
                    f(k);
                }
            }
            BlockRule::Diagonal => f(block.k_range.start + q_off),
            BlockRule::Band { radius } => {
                let g = self.layout.image_grid();
                let (qr, qc) = g.pos(q_off);
                let r0 = qr.saturating_sub(radius);
                let r1 = (qr + radius).min(g.h - 1);
                let c0 = qc.saturating_sub(radius);
                let c1 = (qc + radius).min(g.w - 1);
                for row in r0..=r1 {
                    for col in c0..=c1 {
                        f(block.k_range.start + row * g.w + col);
                    }
                }
            }
            BlockRule::RowGated => {
                let active = self
                    .keyword_mask
                    .as_ref()
                    .map(|m| m.is_active(q_off))
                    .unwrap_or(true);
                if active {
                    for k in block.k_range.clone() {
                        f(k);
                    }
                }
            }
        }
    }

    /// Permitted keys of `block` for one query row (closed form).
    pub fn block_row_pairs(&self, block: &MaskBlock, q_off: usize) -> u64 {
        match block.rule {
            BlockRule::None => 0,
            BlockRule::All => block.k_range.len() as u64,
            BlockRule::Diagonal => 1,
            BlockRule::Band { radius } => {
                let g = self.layout.image_grid();
                let (qr, qc) = g.pos(q_off);
                let rows = (qr + radius).min(g.h - 1) - qr.saturating_sub(radius) + 1;
                let cols = (qc + radius).min(g.w - 1) - qc.saturating_sub(radius) + 1;
                (rows * cols) as u64
            }
            BlockRule::RowGated => {
                let active = self
                    .keyword_mask
                    .as_ref()
                    .map(|m| m.is_active(q_off))
                    .unwrap_or(true);
                if active {
                    block.k_range.len() as u64
                } else {
                    0
                }
            }
        }
    }

    /// Exact permitted (query, key) pair count of one block, closed form.
    pub fn block_pairs(&self, block: &MaskBlock) -> u64 {
        let q = block.q_range.len() as u64;
        let k = block.k_range.len() as u64;
        match block.rule {
            BlockRule::None => 0,
            BlockRule::All => q * k,
            BlockRule::Diagonal => q,
            BlockRule::Band { radius } => {
                let g = self.layout.image_grid();
                band_axis_pairs(g.h, radius) * band_axis_pairs(g.w, radius)
            }
            BlockRule::RowGated => {
                let active = self
                    .keyword_mask
                    .as_ref()
                    .map(|m| m.active_count() as u64)
                    .unwrap_or(q);
                active * k
            }
        }
    }

    /// Exact number of permitted (query, key) pairs across all blocks.
    pub fn permitted_pairs(&self) -> u64 {
        self.blocks().iter().map(|b| self.block_pairs(b)).sum()
    }

    /// Every query row must keep at least one permitted key.
    fn check_no_empty_rows(&self) -> Result<()> {
        let blocks = self.blocks();
        for seg in self.layout.segments() {
            let range = self.layout.segment_range(seg);
            let seg_blocks: Vec<&MaskBlock> = blocks.iter().filter(|b| b.q_seg == seg).collect();
            for q_off in 0..range.len() {
                let keys: u64 = seg_blocks
                    .iter()
                    .map(|b| self.block_row_pairs(b, q_off))
                    .sum();
                if keys == 0 {
                    return Err(Error::EmptyQueryRow {
                        row: range.start + q_off,
                    });
                }
            }
        }
        Ok(())
    }
}

/// Chebyshev-window pairs along one axis of length `n` with radius `r`.
fn band_axis_pairs(n: usize, r: usize) -> u64 {
    (0..n)
        .map(|i| ((i + r).min(n - 1) - i.saturating_sub(r) + 1) as u64)
        .sum()
}

/// One resolved (query segment, key segment) block of a mask.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskBlock {
    pub q_seg: SegmentId,
    pub k_seg: SegmentId,
    pub q_range: std::ops::Range<usize>,
    pub k_range: std::ops::Range<usize>,
    pub rule: BlockRule,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attn::sparse::{KeywordMask, MaskNormalization};
    use proptest::prelude::*;

    fn small_layout(m: usize, grid: Grid, c: usize, subj: Vec<usize>) -> ModalityLayout {
        ModalityLayout::with_congruent_spatial(m, grid, c, subj, vec![0]).unwrap()
    }

    /// Brute-force pair count through the per-pair predicate.
    fn count_by_predicate(spec: &AttentionMaskSpec) -> u64 {
        let l = spec.layout().total_len();
        let mut n = 0;
        for q in 0..l {
            for k in 0..l {
                if spec.permits(q, k) {
                    n += 1;
                }
            }
        }
        n
    }

    /// Same count through the block/row enumeration the engine uses.
    fn count_by_enumeration(spec: &AttentionMaskSpec) -> u64 {
        let mut n = 0;
        for block in spec.blocks() {
            for q_off in 0..block.q_range.len() {
                spec.for_each_key(&block, q_off, |_| n += 1);
            }
        }
        n
    }

    #[test]
    fn pka_diagonal_block_is_identity_pairs() {
        let layout = small_layout(2, Grid::new(2, 2), 1, vec![]);
        let spec = build_mask(&layout, MaskMode::Pka, None).unwrap();
        let sp_start = layout.segment_start(SegmentId::Spatial(0));
        let x_start = layout.segment_start(SegmentId::Image);
        let mut pairs = Vec::new();
        for i in 0..4 {
            for j in 0..4 {
                if spec.permits(x_start + i, sp_start + j) {
                    pairs.push((i, j));
                }
            }
        }
        assert_eq!(pairs, vec![(0, 0), (1, 1), (2, 2), (3, 3)]);
    }

    #[test]
    fn band_neighborhoods_on_2x2_grid() {
        let layout = small_layout(2, Grid::new(2, 2), 1, vec![]);
        let x_start = layout.segment_start(SegmentId::Image);
        let sp_start = layout.segment_start(SegmentId::Spatial(0));

        // k=1 -> radius 0 -> self only.
        let spec = build_mask(&layout, MaskMode::Band(1), None).unwrap();
        let keys: Vec<usize> = (0..4)
            .filter(|&j| spec.permits(x_start, sp_start + j))
            .collect();
        assert_eq!(keys, vec![0]);

        // k=3 -> radius 1 -> the whole 2x2 grid from any corner.
        let spec = build_mask(&layout, MaskMode::Band(3), None).unwrap();
        let keys: Vec<usize> = (0..4)
            .filter(|&j| spec.permits(x_start, sp_start + j))
            .collect();
        assert_eq!(keys, vec![0, 1, 2, 3]);
    }

    #[test]
    fn band_k1_equals_diagonal() {
        let layout = small_layout(3, Grid::new(3, 3), 2, vec![2]);
        let diag = build_mask(&layout, MaskMode::Pka, None).unwrap();
        let band = build_mask(&layout, MaskMode::Band(1), None).unwrap();
        let l = layout.total_len();
        for q in 0..l {
            for k in 0..l {
                assert_eq!(diag.permits(q, k), band.permits(q, k));
            }
        }
    }

    #[test]
    fn band_rejects_even_or_zero_window() {
        let layout = small_layout(2, Grid::new(2, 2), 1, vec![]);
        assert!(build_mask(&layout, MaskMode::Band(2), None).is_err());
        assert!(build_mask(&layout, MaskMode::Band(0), None).is_err());
    }

    #[test]
    fn dense_pair_count_is_l_squared() {
        let layout = small_layout(2, Grid::new(2, 2), 1, vec![]);
        assert_eq!(layout.total_len(), 10);
        let spec = build_mask(&layout, MaskMode::DenseFull, None).unwrap();
        assert_eq!(spec.permitted_pairs(), 100);
    }

    #[test]
    fn frozen_pair_counts_m8_n64_c1() {
        let layout = small_layout(8, Grid::new(8, 8), 1, vec![]);
        assert_eq!(layout.total_len(), 136);

        let dense = build_mask(&layout, MaskMode::DenseFull, None).unwrap();
        assert_eq!(dense.permitted_pairs(), 18_496);

        // 8*72 (text) + 64*8 + 64*64 (image to text/image) + 64 (diagonal)
        // + 64*64 (condition self-attention)
        let pka = build_mask(&layout, MaskMode::Pka, None).unwrap();
        assert_eq!(pka.permitted_pairs(), 9_344);
    }

    #[test]
    fn pka_pairs_affine_in_conditions_dense_quadratic() {
        let n = 64u64;
        let counts: Vec<Vec<u64>> = (1..=4)
            .map(|c| {
                let layout = small_layout(8, Grid::new(8, 8), c, vec![]);
                let pka = build_mask(&layout, MaskMode::Pka, None).unwrap();
                let dense = build_mask(&layout, MaskMode::DenseFull, None).unwrap();
                vec![pka.permitted_pairs(), dense.permitted_pairs()]
            })
            .collect();
        // Exact second differences in c.
        for i in 0..2 {
            let d2_pka = counts[i + 2][0] + counts[i][0] - 2 * counts[i + 1][0];
            let d2_dense = counts[i + 2][1] + counts[i][1] - 2 * counts[i + 1][1];
            assert_eq!(d2_pka, 0);
            assert_eq!(d2_dense, 2 * n * n);
        }
        // Slope per added condition: one diagonal block + one self-attention block.
        assert_eq!(counts[1][0] - counts[0][0], n + n * n);
    }

    #[test]
    fn band_pairs_monotone_in_k_and_bounded_by_dense() {
        let layout = small_layout(4, Grid::new(4, 4), 1, vec![3]);
        let dense = build_mask(&layout, MaskMode::DenseFull, None).unwrap();
        let mut prev = 0;
        for k in [1, 3, 5, 7] {
            let spec = build_mask(&layout, MaskMode::Band(k), None).unwrap();
            let pairs = spec.permitted_pairs();
            assert!(pairs >= prev, "band pairs must be nondecreasing in k");
            assert!(pairs <= dense.permitted_pairs());
            prev = pairs;
        }
    }

    #[test]
    fn every_row_has_a_key_exhaustively() {
        for (m, g, c, s) in [
            (1, Grid::new(2, 2), 0, vec![]),
            (2, Grid::new(2, 2), 1, vec![1]),
            (3, Grid::new(2, 3), 2, vec![2, 4]),
        ] {
            let layout = small_layout(m, g, c, s);
            for mode in [MaskMode::DenseFull, MaskMode::Pka, MaskMode::Band(3)] {
                let spec = build_mask(&layout, mode, None).unwrap();
                let l = layout.total_len();
                for q in 0..l {
                    assert!(
                        (0..l).any(|k| spec.permits(q, k)),
                        "row {q} empty under {mode:?}"
                    );
                }
            }
        }
    }

    #[test]
    fn row_gating_uses_mask_and_counts_active_rows() {
        let layout = small_layout(2, Grid::new(2, 2), 0, vec![3]);
        let mask = KeywordMask::from_active(
            vec![true, false, false, true],
            0,
            0.2,
            MaskNormalization::SoftmaxOverImage,
        );
        let spec = build_mask(&layout, MaskMode::Pka, Some(mask)).unwrap();
        let x = layout.segment_range(SegmentId::Image);
        let sj = layout.segment_range(SegmentId::Subject(0));
        assert!(spec.permits(x.start, sj.start));
        assert!(!spec.permits(x.start + 1, sj.start));
        // 2 active rows * 3 subject keys for the gated block.
        let block = spec
            .blocks()
            .into_iter()
            .find(|b| b.q_seg == SegmentId::Image && b.k_seg == SegmentId::Subject(0))
            .unwrap();
        assert_eq!(spec.block_pairs(&block), 6);
    }

    #[test]
    fn rejects_incongruent_spatial_grid() {
        let err = ModalityLayout::new(
            2,
            Grid::new(2, 2),
            vec![Grid::new(2, 3)],
            vec![],
            vec![0],
        );
        assert!(matches!(err, Err(Error::Alignment(_))));
    }

    #[test]
    fn json_roundtrip() {
        let layout = small_layout(4, Grid::new(2, 3), 1, vec![2]);
        let spec = build_mask(&layout, MaskMode::Band(3), None).unwrap();
        let js = serde_json::to_string(&spec).unwrap();
        let back: AttentionMaskSpec = serde_json::from_str(&js).unwrap();
        assert_eq!(spec, back);
    }

    proptest! {
        /// The predicate route, the block-enumeration route, and the closed
        /// form must agree on every layout.
        #[test]
        fn pair_count_routes_agree(
            m in 1usize..4,
            h in 1usize..4,
            w in 1usize..4,
            c in 0usize..3,
            s in 0usize..3,
            mode_sel in 0usize..4,
            gated in any::<bool>(),
            seed in any::<u64>(),
        ) {
            let subj: Vec<usize> = (0..s).map(|j| j + 1).collect();
            let layout = small_layout(m, Grid::new(h, w), c, subj);
            let mode = match mode_sel {
                0 => MaskMode::DenseFull,
                1 => MaskMode::Pka,
                2 => MaskMode::Band(1),
                _ => MaskMode::Band(3),
            };
            let mask = if gated && s > 0 {
                let mut rng = crate::rng::Rng::new(seed);
                let n = layout.image_len();
                let mut active: Vec<bool> = (0..n).map(|_| rng.next_f64() < 0.5).collect();
                active[0] = true; // keep the mask non-degenerate
                Some(KeywordMask::from_active(active, 0, 0.2, MaskNormalization::SoftmaxOverImage))
            } else {
                None
            };
            let spec = build_mask(&layout, mode, mask).unwrap();
            let a = count_by_predicate(&spec);
            let b = count_by_enumeration(&spec);
            let c = spec.permitted_pairs();
            prop_assert_eq!(a, b);
            prop_assert_eq!(b, c);
        }
    }
}
