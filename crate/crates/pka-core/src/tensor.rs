//! Minimal dense tensor arithmetic.
//!
//! Storage is a flat row-major `Vec<T>` with shape metadata. `f32` is the
//! working precision; every kernel is generic over [`Scalar`] so the same
//! code runs in `f64` "oracle mode" for tight equivalence tolerances.

use std::fmt::Debug;

use crate::error::{Error, Result};

/// Element type for all numeric kernels. Implemented for `f32` and `f64`.
pub trait Scalar:
    num_traits::Float + num_traits::FromPrimitive + Debug + Default + Send + Sync + std::iter::Sum + 'static
{
    /// Sentinel used to exclude keys in dense-mask mode.
    const NEG_SENTINEL: Self;
    const BYTES: usize;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    const NEG_SENTINEL: Self = -1e30;
    const BYTES: usize = 4;

    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const NEG_SENTINEL: Self = -1e30;
    const BYTES: usize = 8;

    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::ShapeMismatch {
                op: "Tensor::new",
                detail: format!("shape {:?} needs {} elements, got {}", shape, expect, data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// 2-D constructor from nested rows; rows must be equally long.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        if rows.iter().any(|x| x.len() != c) {
            return Err(Error::ShapeMismatch {
                op: "Tensor::from_rows",
                detail: "ragged rows".into(),
            });
        }
        Ok(Tensor {
            shape: vec![r, c],
            data: rows.iter().flatten().copied().collect(),
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    /// Row count of a 2-D tensor.
    pub fn rows(&self) -> usize {
        debug_assert!(self.is_matrix());
        self.shape[0]
    }

    /// Column count of a 2-D tensor.
    pub fn cols(&self) -> usize {
        debug_assert!(self.is_matrix());
        self.shape[1]
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.shape[1] + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: T) {
        let c = self.shape[1];
        self.data[i * c + j] = v;
    }

    /// Reinterpret as a new shape with the same element count.
    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "Tensor::reshape",
                detail: format!("cannot view {:?} as {:?}", self.shape, shape),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn binary(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                detail: format!("{:?} vs {:?}", self.shape, other.shape),
            });
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.binary(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.binary(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.binary(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|x| x * c)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let mut out = Tensor::zeros(&[c, r]);
        for i in 0..r {
            for j in 0..c {
                out.data[j * r + i] = self.data[i * c + j];
            }
        }
        out
    }

    /// Largest absolute element difference; shapes must agree.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Cast element type (f32 <-> f64).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::from_f64(x.to_f64())).collect(),
        }
    }
}

/// `a (m x k) * b (k x n) -> m x n`, accumulated in the element precision.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if !a.is_matrix() || !b.is_matrix() || a.cols() != b.rows() {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            detail: format!("{:?} x {:?}", a.shape(), b.shape()),
        });
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        let arow = a.row(i);
        let orow = out.row_mut(i);
        for (p, &av) in arow.iter().enumerate().take(k) {
            let brow = b.row(p);
            for j in 0..n {
                orow[j] = orow[j] + av * brow[j];
            }
        }
    }
    debug_assert!(out.all_finite(), "matmul produced non-finite values");
    Ok(out)
}

/// Dot product of two equal-length slices.
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// Numerically stable softmax over a slice, written in place.
pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    if row.is_empty() {
        return;
    }
    let mut m = row[0];
    for &x in row.iter() {
        if x > m {
            m = x;
        }
    }
    let mut z = T::zero();
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        z = z + *x;
    }
    for x in row.iter_mut() {
        *x = *x / z;
    }
}

/// Row-wise softmax with per-row max subtraction. Rows of all `-inf` (or the
/// dense-mask sentinel everywhere) are a contract violation: masking must
/// leave at least one live key per query.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    assert!(x.is_matrix(), "softmax_rows expects a matrix");
    let mut out = x.clone();
    for i in 0..out.rows() {
        softmax_in_place(out.row_mut(i));
    }
    debug_assert!(out.all_finite(), "softmax produced non-finite values");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // Independent oracle: classic i-j-k loop (the implementation iterates i-k-j).
    fn matmul_oracle(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a.at(i, p) * b.at(p, j);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    #[test]
    fn matmul_identity() {
        let eye = Tensor::from_rows(&[vec![1.0_f64, 0.0], vec![0.0, 1.0]]).unwrap();
        let m = Tensor::from_rows(&[vec![3.0, -1.5], vec![2.25, 8.0]]).unwrap();
        assert_eq!(matmul(&eye, &m).unwrap(), m);
    }

    #[test]
    fn matmul_hand_example() {
        let a = Tensor::from_rows(&[vec![1.0_f64, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![5.0], vec![6.0]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_matches_independent_loop() {
        let mut rng = crate::rng::Rng::new(11);
        let a = crate::rng::normal_tensor::<f64>(&mut rng, &[7, 5]);
        let b = crate::rng::normal_tensor::<f64>(&mut rng, &[5, 3]);
        let got = matmul(&a, &b).unwrap();
        let want = matmul_oracle(&a, &b);
        assert!(got.max_abs_diff(&want) <= 1e-6);
    }

    #[test]
    fn matmul_dimension_mismatch() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[2, 3]);
        assert!(matmul(&a, &b).is_err());
    }

    #[test]
    fn softmax_uniform_row() {
        let x = Tensor::from_rows(&[vec![0.0_f64, 0.0, 0.0]]).unwrap();
        let y = softmax_rows(&x);
        for &v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_large_logit_no_overflow() {
        let x = Tensor::from_rows(&[vec![1000.0_f32, 0.0]]).unwrap();
        let y = softmax_rows(&x);
        assert!(y.all_finite());
        assert!((y.at(0, 0) - 1.0).abs() < 1e-6);
        assert!(y.at(0, 1) >= 0.0 && y.at(0, 1) < 1e-6);
    }

    #[test]
    fn softmax_frozen_values() {
        // exp/sum evaluated independently: softmax([1,2,3]).
        let x = Tensor::from_rows(&[vec![1.0_f64, 2.0, 3.0]]).unwrap();
        let y = softmax_rows(&x);
        let want = [0.09003057317038046, 0.24472847105479767, 0.6652409557748219];
        for (got, want) in y.data().iter().zip(want) {
            assert!((got - want).abs() < 1e-5);
        }
    }

    #[test]
    fn matmul_associative_within_tolerance() {
        let mut rng = crate::rng::Rng::new(5);
        let a = crate::rng::normal_tensor::<f32>(&mut rng, &[8, 8]);
        let b = crate::rng::normal_tensor::<f32>(&mut rng, &[8, 8]);
        let c = crate::rng::normal_tensor::<f32>(&mut rng, &[8, 8]);
        let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
        let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
        assert!(left.max_abs_diff(&right) <= 1e-4);
    }

    #[test]
    fn new_rejects_wrong_element_count() {
        assert!(Tensor::new(vec![2, 3], vec![0.0_f32; 5]).is_err());
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(
            rows in 1usize..6,
            cols in 1usize..8,
            seed in any::<u64>(),
            scale in 0.1f64..100.0,
        ) {
            let mut rng = crate::rng::Rng::new(seed);
            let x = crate::rng::normal_tensor::<f64>(&mut rng, &[rows, cols]).scale(scale);
            let y = softmax_rows(&x);
            for i in 0..rows {
                let s: f64 = y.row(i).iter().sum();
                prop_assert!((s - 1.0).abs() <= 1e-6);
                prop_assert!(y.row(i).iter().all(|v| v.is_finite()));
            }
        }
    }
}
