//! Redundancy statistics over attention matrices: how much probability mass
//! sits within a grid neighborhood of the query position, and how sparse the
//! keyword-affinity activation is.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::Grid;
use crate::tensor::{Scalar, Tensor};

/// Where an analyzed matrix came from.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatrixProvenance {
    pub layer: Option<usize>,
    pub head: Option<usize>,
    pub step: Option<usize>,
}

/// Fraction of attention mass within each grid-Chebyshev radius, averaged
/// over query rows. Nondecreasing in the radius; 1 at the maximal radius.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BandMassProfile {
    pub radii: Vec<usize>,
    pub mass: Vec<f64>,
    pub provenance: MatrixProvenance,
}

const ROW_SUM_TOLERANCE: f64 = 1e-4;

/// Band mass of a row-stochastic `N x N` attention matrix whose rows and
/// columns index the same `H x W` grid.
pub fn band_mass<T: Scalar>(
    attn: &Tensor<T>,
    grid: Grid,
    radii: &[usize],
    provenance: MatrixProvenance,
) -> Result<BandMassProfile> {
    let n = grid.len();
    if !attn.is_matrix() || attn.rows() != n || attn.cols() != n {
        return Err(Error::ShapeMismatch {
            op: "band_mass",
            detail: format!("expected {n}x{n} for grid {}x{}, got {:?}", grid.h, grid.w, attn.shape()),
        });
    }
    if radii.is_empty() {
        return Err(Error::InvalidParameter("no radii requested".into()));
    }
    for i in 0..n {
        let s: f64 = attn.row(i).iter().map(|x| x.to_f64()).sum();
        if (s - 1.0).abs() > ROW_SUM_TOLERANCE {
            return Err(Error::InvalidParameter(format!(
                "row {i} sums to {s}, not row-stochastic"
            )));
        }
    }

    // Single pass: histogram mass per Chebyshev distance, then prefix sums.
    let max_dist = (grid.h - 1).max(grid.w - 1);
    let mut by_dist = vec![0.0f64; max_dist + 1];
    for i in 0..n {
        for j in 0..n {
            by_dist[grid.chebyshev(i, j)] += attn.at(i, j).to_f64();
        }
    }
    let mut cumulative = vec![0.0f64; max_dist + 1];
    let mut acc = 0.0;
    for (d, &m) in by_dist.iter().enumerate() {
        acc += m;
        cumulative[d] = acc / n as f64;
    }

    let mut radii_sorted = radii.to_vec();
    radii_sorted.sort_unstable();
    radii_sorted.dedup();
    let mass = radii_sorted
        .iter()
        .map(|&r| cumulative[r.min(max_dist)])
        .collect();
    Ok(BandMassProfile {
        radii: radii_sorted,
        mass,
        provenance,
    })
}

/// Expected band mass of uniform attention at radius `r`: the average
/// neighborhood size divided by N.
pub fn uniform_band_mass(grid: Grid, r: usize) -> f64 {
    let n = grid.len() as f64;
    let axis = |len: usize| -> f64 {
        (0..len)
            .map(|i| ((i + r).min(len - 1) - i.saturating_sub(r) + 1) as f64)
            .sum::<f64>()
    };
    axis(grid.h) * axis(grid.w) / (n * n)
}

/// Fraction of image tokens whose pre-threshold keyword score clears
/// epsilon.
pub fn keyword_sparsity(scores: &[f64], epsilon: f64) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    scores.iter().filter(|&&s| s >= epsilon).count() as f64 / scores.len() as f64
}
