//! Attention kernels: the dense reference implementations and the
//! block-sparse engine they are verified against.

pub mod dense;
pub mod equiv;
pub mod sparse;

use crate::error::{Error, Result};
use crate::rng::{normal_tensor, Rng};
use crate::tensor::{Scalar, Tensor};

/// Per-head query/key/value projections over the full token sequence.
#[derive(Debug, Clone)]
pub struct AttentionInputs<T> {
    q: Vec<Tensor<T>>,
    k: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> AttentionInputs<T> {
    pub fn new(q: Vec<Tensor<T>>, k: Vec<Tensor<T>>, v: Vec<Tensor<T>>) -> Result<Self> {
        if q.is_empty() || q.len() != k.len() || q.len() != v.len() {
            return Err(Error::ShapeMismatch {
                op: "AttentionInputs::new",
                detail: format!("head counts q={} k={} v={}", q.len(), k.len(), v.len()),
            });
        }
        let (l, d) = (q[0].rows(), q[0].cols());
        if l == 0 || d == 0 {
            return Err(Error::ShapeMismatch {
                op: "AttentionInputs::new",
                detail: "empty sequence or zero head dim".into(),
            });
        }
        for t in q.iter().chain(&k).chain(&v) {
            if !t.is_matrix() || t.rows() != l || t.cols() != d {
                return Err(Error::ShapeMismatch {
                    op: "AttentionInputs::new",
                    detail: format!("expected {l}x{d}, got {:?}", t.shape()),
                });
            }
        }
        Ok(AttentionInputs { q, k, v })
    }

    /// Random standard-normal projections for `heads` heads over `seq_len`
    /// tokens with head dimension `head_dim`.
    pub fn random(rng: &mut Rng, seq_len: usize, heads: usize, head_dim: usize) -> Self {
        let mk = |rng: &mut Rng| {
            (0..heads)
                .map(|_| normal_tensor::<T>(rng, &[seq_len, head_dim]))
                .collect::<Vec<_>>()
        };
        AttentionInputs {
            q: mk(rng),
            k: mk(rng),
            v: mk(rng),
        }
    }

    pub fn num_heads(&self) -> usize {
        self.q.len()
    }

    pub fn seq_len(&self) -> usize {
        self.q[0].rows()
    }

    pub fn head_dim(&self) -> usize {
        self.q[0].cols()
    }

    /// Logit scale 1/sqrt(d).
    pub fn scale(&self) -> T {
        T::from_f64(1.0 / (self.head_dim() as f64).sqrt())
    }

    pub fn q(&self, head: usize) -> &Tensor<T> {
        &self.q[head]
    }

    pub fn k(&self, head: usize) -> &Tensor<T> {
        &self.k[head]
    }

    pub fn v(&self, head: usize) -> &Tensor<T> {
        &self.v[head]
    }

    pub fn cast<U: Scalar>(&self) -> AttentionInputs<U> {
        AttentionInputs {
            q: self.q.iter().map(Tensor::cast).collect(),
            k: self.k.iter().map(Tensor::cast).collect(),
            v: self.v.iter().map(Tensor::cast).collect(),
        }
    }
}

/// Which implementation computes masked attention. Both produce the same
/// joint-softmax semantics; they differ in algorithm and cost.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionBackend {
    /// Per-row exact-exclusion oracle over the full pair predicate.
    DenseOracle,
    /// Block-streaming engine (position-aligned / keyword-scoped kernels
    /// plus the running-softmax merger).
    SparseMerged,
}
