//! Synthetic grid dataset.
//!
//! Each sample places one "subject" (a 2x2 patch with a per-subject channel
//! signature) on an otherwise empty grid. The spatial condition is the
//! shape's occupancy map, derived deterministically from the target so
//! controllability is measurable; the subject condition is the patch
//! itself; the text names the subject through a keyword slot.

use crate::layout::Grid;
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

/// Vocabulary of frozen random embeddings: ids 0..4 are filler words,
/// 4..4+NUM_SUBJECTS name the subjects.
pub const VOCAB_SIZE: usize = 16;
pub const NUM_SUBJECTS: usize = 4;
pub const SUBJECT_WORD_BASE: usize = 4;
/// Subject patch side (patch is SUBJECT_SIDE x SUBJECT_SIDE cells).
pub const SUBJECT_SIDE: usize = 2;

/// Per-subject channel signatures; each averages to 1 across channels so
/// the derived occupancy map of a clean target equals its spatial condition
/// exactly.
fn subject_signature(subject: usize, channels: usize) -> Vec<f64> {
    let a = 0.4 + 0.4 * subject as f64; // 0.4, 0.8, 1.2, 1.6
    (0..channels)
        .map(|c| if c % 2 == 0 { a } else { 2.0 - a })
        .collect()
}

#[derive(Debug, Clone)]
pub struct SyntheticSample<T> {
    /// Target image, grid cells as rows: N x channels.
    pub target: Tensor<T>,
    /// Occupancy map on the same grid: N x 1.
    pub spatial: Tensor<T>,
    /// Subject patch tokens: (SUBJECT_SIDE^2) x channels.
    pub subject: Tensor<T>,
    /// Text as vocabulary ids.
    pub text: Vec<usize>,
    /// Index into `text` of the slot naming the subject.
    pub keyword_pos: usize,
    pub subject_id: usize,
}

/// Deterministic spatial-condition rule: per-cell channel mean clamped to
/// [0, 1]. On clean targets this reproduces the occupancy map exactly; on
/// generated grids it measures how well the shape landed.
pub fn derive_spatial<T: Scalar>(image: &Tensor<T>) -> Tensor<T> {
    let (n, ch) = (image.rows(), image.cols());
    let mut out = Tensor::zeros(&[n, 1]);
    for i in 0..n {
        let mean: f64 = image.row(i).iter().map(|x| x.to_f64()).sum::<f64>() / ch as f64;
        out.set(i, 0, T::from_f64(mean.clamp(0.0, 1.0)));
    }
    out
}

/// Mean squared error between the condition derived from a generated grid
/// and the conditioning map it was asked to follow.
pub fn condition_reconstruction_mse<T: Scalar>(generated: &Tensor<T>, spatial: &Tensor<T>) -> f64 {
    let derived = derive_spatial(generated);
    let n = derived.len() as f64;
    derived
        .data()
        .iter()
        .zip(spatial.data())
        .map(|(&a, &b)| {
            let d = a.to_f64() - b.to_f64();
            d * d
        })
        .sum::<f64>()
        / n
}

pub fn make_sample<T: Scalar>(
    rng: &mut Rng,
    grid: Grid,
    channels: usize,
    text_len: usize,
) -> SyntheticSample<T> {
    assert!(grid.h > SUBJECT_SIDE && grid.w > SUBJECT_SIDE, "grid too small");
    assert!(text_len >= 2);
    let subject_id = rng.next_below(NUM_SUBJECTS);
    let sig = subject_signature(subject_id, channels);
    let r0 = rng.next_below(grid.h - SUBJECT_SIDE + 1);
    let c0 = rng.next_below(grid.w - SUBJECT_SIDE + 1);

    let n = grid.len();
    let mut target = Tensor::zeros(&[n, channels]);
    let mut spatial = Tensor::zeros(&[n, 1]);
    for dr in 0..SUBJECT_SIDE {
        for dc in 0..SUBJECT_SIDE {
            let idx = (r0 + dr) * grid.w + (c0 + dc);
            for (c, &s) in sig.iter().enumerate() {
                target.set(idx, c, T::from_f64(s));
            }
            spatial.set(idx, 0, T::one());
        }
    }

    let mut subject = Tensor::zeros(&[SUBJECT_SIDE * SUBJECT_SIDE, channels]);
    for i in 0..SUBJECT_SIDE * SUBJECT_SIDE {
        for (c, &s) in sig.iter().enumerate() {
            subject.set(i, c, T::from_f64(s));
        }
    }

    // Filler words around the subject name at a fixed keyword slot.
    let keyword_pos = 1;
    let text: Vec<usize> = (0..text_len)
        .map(|i| {
            if i == keyword_pos {
                SUBJECT_WORD_BASE + subject_id
            } else {
                rng.next_below(SUBJECT_WORD_BASE)
            }
        })
        .collect();

    SyntheticSample {
        target,
        spatial,
        subject,
        text,
        keyword_pos,
        subject_id,
    }
}

pub fn make_dataset<T: Scalar>(
    rng: &mut Rng,
    grid: Grid,
    channels: usize,
    text_len: usize,
    count: usize,
) -> Vec<SyntheticSample<T>> {
    (0..count)
        .map(|_| make_sample(rng, grid, channels, text_len))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_condition_matches_clean_target() {
        let mut rng = Rng::new(1);
        let grid = Grid::new(6, 6);
        for _ in 0..8 {
            let s: SyntheticSample<f64> = make_sample(&mut rng, grid, 2, 4);
            let derived = derive_spatial(&s.target);
            assert!(derived.max_abs_diff(&s.spatial) < 1e-12);
            assert_eq!(condition_reconstruction_mse(&s.target, &s.spatial), 0.0);
        }
    }

    #[test]
    fn keyword_slot_names_the_subject() {
        let mut rng = Rng::new(2);
        let s: SyntheticSample<f32> = make_sample(&mut rng, Grid::new(5, 5), 2, 4);
        assert_eq!(s.text[s.keyword_pos], SUBJECT_WORD_BASE + s.subject_id);
        assert!(s.text.iter().all(|&w| w < VOCAB_SIZE));
    }

    #[test]
    fn dataset_is_deterministic_per_seed() {
        let a: Vec<SyntheticSample<f32>> =
            make_dataset(&mut Rng::new(7), Grid::new(5, 5), 2, 4, 6);
        let b: Vec<SyntheticSample<f32>> =
            make_dataset(&mut Rng::new(7), Grid::new(5, 5), 2, 4, 6);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.target, y.target);
            assert_eq!(x.text, y.text);
        }
    }
}
