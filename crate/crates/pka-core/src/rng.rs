//! Deterministic counter-based random generator.
//!
//! Algorithm: SplitMix64 (Steele, Lea & Flood). The state is a 64-bit
//! counter advanced by the golden-gamma increment; each output is a fixed
//! bijective mix of the counter, so the stream is identical bit for bit on
//! every platform. Constants:
//!
//! ```text
//! increment  0x9E3779B97F4A7C15
//! mix mul 1  0xBF58476D1CE4E5B9   (after xor-shift by 30)
//! mix mul 2  0x94D049BB133111EB   (after xor-shift by 27)
//! final xor-shift by 31
//! ```
//!
//! Uniform doubles are `((bits >> 11) + 1) / 2^53`, i.e. the open-closed
//! interval (0, 1]. Normal variates use the trigonometric Box-Muller
//! transform: with `u1, u2` two consecutive uniforms, `r = sqrt(-2 ln u1)`,
//! the pair is `(r cos(2*pi*u2), r sin(2*pi*u2))`; the cosine branch is
//! returned first and the sine branch is cached for the next call.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;
const MIX1: u64 = 0xBF58_476D_1CE4_E5B9;
const MIX2: u64 = 0x94D0_49BB_1331_11EB;

/// Seeded deterministic generator. Single-owner mutable state; do not share
/// one instance across concurrent tasks.
#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
    cached_normal: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            state: seed,
            cached_normal: None,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GAMMA);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(MIX1);
        z = (z ^ (z >> 27)).wrapping_mul(MIX2);
        z ^ (z >> 31)
    }

    /// Uniform in (0, 1].
    pub fn next_open01(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [0, 1).
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n).
    pub fn next_below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_f64() * n as f64) as usize % n
    }

    /// Standard normal draw via Box-Muller (cosine branch first).
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.cached_normal.take() {
            return z;
        }
        let u1 = self.next_open01();
        let u2 = self.next_open01();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.cached_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Derive an independent child stream.
    pub fn fork(&mut self) -> Rng {
        Rng::new(self.next_u64())
    }
}

/// `n` independent draws from N(mu, sigma^2), materialized in precision `T`.
/// Draws are generated in f64 so the f32 and f64 streams see the same values.
pub fn sample_normal<T: Scalar>(rng: &mut Rng, mu: f64, sigma: f64, n: usize) -> Result<Tensor<T>> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "sigma must be > 0, got {sigma}"
        )));
    }
    let data: Vec<T> = (0..n)
        .map(|_| T::from_f64(mu + sigma * rng.normal()))
        .collect();
    Tensor::new(vec![n], data)
}

/// Tensor of standard-normal entries with the given shape.
pub fn normal_tensor<T: Scalar>(rng: &mut Rng, shape: &[usize]) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n).map(|_| T::from_f64(rng.normal())).collect();
    Tensor::new(shape.to_vec(), data).expect("shape/data constructed consistently")
}
