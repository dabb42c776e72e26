//! Reverse-mode automatic differentiation.
//!
//! A [`Tape`] records eagerly-evaluated primitives in topological order
//! (every node's parents precede it); [`Tape::backward`] replays it once in
//! reverse. Masked attention is a single fused primitive whose forward can
//! be served by either the dense oracle or the sparse engine and whose
//! backward walks exactly the permitted pairs of the mask, so gradients cost
//! the same order as the forward.
//!
//! Keyword masks are deliberately *not* tape values: the thresholded
//! indicator is non-differentiable, so a mask enters a tape only as a
//! constant baked into the attention node's mask spec (stop-gradient).

use std::rc::Rc;

use crate::attn::{dense, sparse, AttentionBackend, AttentionInputs};
use crate::error::{Error, Result};
use crate::layout::{AttentionMaskSpec, MaskBlock};
use crate::tensor::{dot, matmul, softmax_rows, Scalar, Tensor};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

#[derive(Debug, Clone)]
enum Op<T> {
    Input,
    MatMul(VarId, VarId),
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    Scale(VarId, T),
    /// `x (m x n) + bias (1 x n)` broadcast over rows.
    AddRowBias(VarId, VarId),
    Silu(VarId),
    /// Row-wise RMS normalization with learnable per-column gain.
    RmsNorm(VarId, VarId),
    SoftmaxRows(VarId),
    SumAll(VarId),
    GatherRows(VarId, Rc<Vec<usize>>),
    ConcatRows(Vec<VarId>),
    SliceRows(VarId, usize, usize),
    /// Fused multi-head masked attention over packed `L x (h*d)` tensors.
    Attention {
        q: VarId,
        k: VarId,
        v: VarId,
        spec: Rc<AttentionMaskSpec>,
        heads: usize,
        backend: AttentionBackend,
    },
}

#[derive(Debug, Clone)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
}

const RMS_EPS: f64 = 1e-6;

/// Recorded forward computation. One tape per training step; not shared
/// across concurrent tasks.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: VarId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> VarId {
        self.nodes.push(Node { op, value });
        VarId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor<T>) -> VarId {
        self.push(Op::Input, value)
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let value = matmul(self.value(a), self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), value))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(Op::Sub(a, b), value))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let value = self.value(a).mul(self.value(b))?;
        Ok(self.push(Op::Mul(a, b), value))
    }

    pub fn scale(&mut self, x: VarId, c: T) -> VarId {
        let value = self.value(x).scale(c);
        self.push(Op::Scale(x, c), value)
    }

    pub fn add_row_bias(&mut self, x: VarId, bias: VarId) -> Result<VarId> {
        let xv = self.value(x);
        let bv = self.value(bias);
        if !bv.is_matrix() || bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(Error::ShapeMismatch {
                op: "add_row_bias",
                detail: format!("x {:?}, bias {:?}", xv.shape(), bv.shape()),
            });
        }
        let mut value = xv.clone();
        for i in 0..value.rows() {
            let row = value.row_mut(i);
            for (a, &b) in row.iter_mut().zip(bv.row(0)) {
                *a = *a + b;
            }
        }
        Ok(self.push(Op::AddRowBias(x, bias), value))
    }

    pub fn silu(&mut self, x: VarId) -> VarId {
        let value = self.value(x).map(|v| v * sigmoid(v));
        self.push(Op::Silu(x), value)
    }

    pub fn rms_norm(&mut self, x: VarId, gain: VarId) -> Result<VarId> {
        let xv = self.value(x);
        let gv = self.value(gain);
        if !gv.is_matrix() || gv.rows() != 1 || gv.cols() != xv.cols() {
            return Err(Error::ShapeMismatch {
                op: "rms_norm",
                detail: format!("x {:?}, gain {:?}", xv.shape(), gv.shape()),
            });
        }
        let mut value = xv.clone();
        let n = xv.cols();
        for i in 0..xv.rows() {
            let r = rms(xv.row(i));
            let row = value.row_mut(i);
            for j in 0..n {
                row[j] = row[j] * gv.at(0, j) / r;
            }
        }
        Ok(self.push(Op::RmsNorm(x, gain), value))
    }

    pub fn softmax_rows(&mut self, x: VarId) -> VarId {
        let value = softmax_rows(self.value(x));
        self.push(Op::SoftmaxRows(x), value)
    }

    pub fn sum(&mut self, x: VarId) -> VarId {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(Op::SumAll(x), value)
    }

    pub fn gather_rows(&mut self, x: VarId, indices: Vec<usize>) -> Result<VarId> {
        let xv = self.value(x);
        let d = xv.cols();
        if indices.iter().any(|&i| i >= xv.rows()) {
            return Err(Error::InvalidParameter("gather index out of range".into()));
        }
        let mut value = Tensor::zeros(&[indices.len(), d]);
        for (r, &i) in indices.iter().enumerate() {
            value.row_mut(r).copy_from_slice(xv.row(i));
        }
        Ok(self.push(Op::GatherRows(x, Rc::new(indices)), value))
    }

    pub fn concat_rows(&mut self, xs: &[VarId]) -> Result<VarId> {
        if xs.is_empty() {
            return Err(Error::InvalidParameter("concat of nothing".into()));
        }
        let d = self.value(xs[0]).cols();
        let total: usize = xs.iter().map(|&x| self.value(x).rows()).sum();
        let mut value = Tensor::zeros(&[total, d]);
        let mut at = 0;
        for &x in xs {
            let xv = self.value(x);
            if xv.cols() != d {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    detail: "column counts differ".into(),
                });
            }
            for i in 0..xv.rows() {
                value.row_mut(at).copy_from_slice(xv.row(i));
                at += 1;
            }
        }
        Ok(self.push(Op::ConcatRows(xs.to_vec()), value))
    }

    pub fn slice_rows(&mut self, x: VarId, start: usize, len: usize) -> Result<VarId> {
        let xv = self.value(x);
        if start + len > xv.rows() {
            return Err(Error::ShapeMismatch {
                op: "slice_rows",
                detail: format!("{start}+{len} > {}", xv.rows()),
            });
        }
        let d = xv.cols();
        let mut value = Tensor::zeros(&[len, d]);
        for r in 0..len {
            value.row_mut(r).copy_from_slice(xv.row(start + r));
        }
        Ok(self.push(Op::SliceRows(x, start, len), value))
    }

    /// Fused masked multi-head attention. `q`, `k`, `v` are packed
    /// `L x (heads * d)`; the mask spec is a constant of the node.
    pub fn attention(
        &mut self,
        q: VarId,
        k: VarId,
        v: VarId,
        spec: Rc<AttentionMaskSpec>,
        heads: usize,
        backend: AttentionBackend,
    ) -> Result<VarId> {
        let inputs = packed_to_heads(self.value(q), self.value(k), self.value(v), heads)?;
        let value = match backend {
            AttentionBackend::DenseOracle => dense::masked_attention_oracle(&inputs, &spec)?,
            AttentionBackend::SparseMerged => sparse::pka_attention(&inputs, &spec, None)?,
        };
        Ok(self.push(
            Op::Attention {
                q,
                k,
                v,
                spec,
                heads,
                backend,
            },
            value,
        ))
    }

    /// Reverse pass from a scalar loss; returns one adjoint slot per node.
    /// Each node is visited exactly once, in reverse topological order.
    pub fn backward(&self, loss: VarId) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::InvalidParameter(
                "backward expects a scalar-valued loss node".into(),
            ));
        }
        let mut adj: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            self.propagate(idx, &g, &mut adj)?;
            adj[idx] = Some(g);
        }
        Ok(Gradients { adj })
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, adj: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Input => {}
            Op::MatMul(a, b) => {
                let da = matmul(g, &self.value(*b).transpose())?;
                let db = matmul(&self.value(*a).transpose(), g)?;
                accumulate(adj, *a, da);
                accumulate(adj, *b, db);
            }
            Op::Add(a, b) => {
                accumulate(adj, *a, g.clone());
                accumulate(adj, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(adj, *a, g.clone());
                accumulate(adj, *b, g.scale(-T::one()));
            }
            Op::Mul(a, b) => {
                accumulate(adj, *a, g.mul(self.value(*b))?);
                accumulate(adj, *b, g.mul(self.value(*a))?);
            }
            Op::Scale(x, c) => accumulate(adj, *x, g.scale(*c)),
            Op::AddRowBias(x, bias) => {
                accumulate(adj, *x, g.clone());
                let mut db = Tensor::zeros(&[1, g.cols()]);
                for i in 0..g.rows() {
                    for (acc, &v) in db.row_mut(0).iter_mut().zip(g.row(i)) {
                        *acc = *acc + v;
                    }
                }
                accumulate(adj, *bias, db);
            }
            Op::Silu(x) => {
                let dx = self
                    .value(*x)
                    .map(|v| {
                        let s = sigmoid(v);
                        s * (T::one() + v * (T::one() - s))
                    })
                    .mul(g)?;
                accumulate(adj, *x, dx);
            }
            Op::RmsNorm(x, gain) => {
                let xv = self.value(*x);
                let gv = self.value(*gain);
                let n = xv.cols();
                let mut dx = Tensor::zeros(xv.shape());
                let mut dg = Tensor::zeros(&[1, n]);
                let inv_n = T::from_f64(1.0 / n as f64);
                for i in 0..xv.rows() {
                    let r = rms(xv.row(i));
                    let inv_r = T::one() / r;
                    // s = sum_k g_ik * gain_k * x_ik
                    let mut s = T::zero();
                    for j in 0..n {
                        s = s + g.at(i, j) * gv.at(0, j) * xv.at(i, j);
                    }
                    let coef = s * inv_n * inv_r * inv_r * inv_r;
                    for j in 0..n {
                        let d = g.at(i, j) * gv.at(0, j) * inv_r - xv.at(i, j) * coef;
                        dx.set(i, j, d);
                        let cur = dg.at(0, j);
                        dg.set(0, j, cur + g.at(i, j) * xv.at(i, j) * inv_r);
                    }
                }
                accumulate(adj, *x, dx);
                accumulate(adj, *gain, dg);
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let mut dx = Tensor::zeros(y.shape());
                for i in 0..y.rows() {
                    let gy = dot(g.row(i), y.row(i));
                    for j in 0..y.cols() {
                        dx.set(i, j, y.at(i, j) * (g.at(i, j) - gy));
                    }
                }
                accumulate(adj, *x, dx);
            }
            Op::SumAll(x) => {
                let dx = Tensor::full(self.value(*x).shape(), g.data()[0]);
                accumulate(adj, *x, dx);
            }
            Op::GatherRows(x, indices) => {
                let mut dx = Tensor::zeros(self.value(*x).shape());
                for (r, &i) in indices.iter().enumerate() {
                    // scatter-add: repeated indices accumulate
                    for (acc, &v) in dx.row_mut(i).iter_mut().zip(g.row(r)) {
                        *acc = *acc + v;
                    }
                }
                accumulate(adj, *x, dx);
            }
            Op::ConcatRows(xs) => {
                let mut at = 0;
                for &x in xs {
                    let rows = self.value(x).rows();
                    let mut dx = Tensor::zeros(self.value(x).shape());
                    for r in 0..rows {
                        dx.row_mut(r).copy_from_slice(g.row(at + r));
                    }
                    at += rows;
                    accumulate(adj, x, dx);
                }
            }
            Op::SliceRows(x, start, len) => {
                let mut dx = Tensor::zeros(self.value(*x).shape());
                for r in 0..*len {
                    dx.row_mut(start + r).copy_from_slice(g.row(r));
                }
                accumulate(adj, *x, dx);
            }
            Op::Attention {
                q,
                k,
                v,
                spec,
                heads,
                ..
            } => {
                let (dq, dk, dv) = attention_backward(
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    &node.value,
                    g,
                    spec,
                    *heads,
                )?;
                accumulate(adj, *q, dq);
                accumulate(adj, *k, dk);
                accumulate(adj, *v, dv);
            }
        }
        Ok(())
    }
}

/// Adjoints indexed by [`VarId`]; zero tensors for untouched leaves.
#[derive(Debug)]
pub struct Gradients<T> {
    adj: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, id: VarId, like: &Tensor<T>) -> Tensor<T> {
        match &self.adj[id.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(like.shape()),
        }
    }
}

fn accumulate<T: Scalar>(adj: &mut [Option<Tensor<T>>], id: VarId, grad: Tensor<T>) {
    match &mut adj[id.0] {
        Some(existing) => {
            *existing = existing.add(&grad).expect("adjoint shapes agree");
        }
        slot @ None => *slot = Some(grad),
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn rms<T: Scalar>(row: &[T]) -> T {
    let n = T::from_f64(row.len() as f64);
    let ms: T = row.iter().map(|&x| x * x).sum::<T>() / n + T::from_f64(RMS_EPS);
    ms.sqrt()
}

/// Split packed `L x (h*d)` q/k/v into per-head attention inputs.
pub fn packed_to_heads<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
) -> Result<AttentionInputs<T>> {
    let cols = q.cols();
    if heads == 0 || cols % heads != 0 {
        return Err(Error::ShapeMismatch {
            op: "packed_to_heads",
            detail: format!("{cols} columns not divisible into {heads} heads"),
        });
    }
    let d = cols / heads;
    let l = q.rows();
    let slice = |t: &Tensor<T>, h: usize| {
        let mut out = Tensor::zeros(&[l, d]);
        for i in 0..l {
            out.row_mut(i).copy_from_slice(&t.row(i)[h * d..(h + 1) * d]);
        }
        out
    };
    AttentionInputs::new(
        (0..heads).map(|h| slice(q, h)).collect(),
        (0..heads).map(|h| slice(k, h)).collect(),
        (0..heads).map(|h| slice(v, h)).collect(),
    )
}

/// Masked-attention VJP walking only the permitted pairs. Per query row:
/// recompute the row's logits once, then with `p_ij = exp(s_ij - m_i)/z_i`
/// and `go_i = g_i . out_i`:
///
/// ```text
/// dv_j += p_ij g_i
/// ds_ij = p_ij (g_i . v_j - go_i)
/// dq_i += ds_ij * scale * k_j,   dk_j += ds_ij * scale * q_i
/// ```
fn attention_backward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    out: &Tensor<T>,
    g: &Tensor<T>,
    spec: &AttentionMaskSpec,
    heads: usize,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let layout = spec.layout();
    let l = layout.total_len();
    let cols = q.cols();
    let d = cols / heads;
    let scale = T::from_f64(1.0 / (d as f64).sqrt());
    let mut dq = Tensor::zeros(q.shape());
    let mut dk = Tensor::zeros(k.shape());
    let mut dv = Tensor::zeros(v.shape());

    let blocks = spec.blocks();
    let mut row_keys: Vec<usize> = Vec::new();
    let mut row_logits: Vec<T> = Vec::new();

    for seg in layout.segments() {
        let seg_blocks: Vec<&MaskBlock> = blocks.iter().filter(|b| b.q_seg == seg).collect();
        for (q_off, i) in layout.segment_range(seg).enumerate() {
            for head in 0..heads {
                let hcols = head * d..(head + 1) * d;
                let qrow = &q.row(i)[hcols.clone()];
                row_keys.clear();
                row_logits.clear();
                let mut m = T::neg_infinity();
                for block in &seg_blocks {
                    spec.for_each_key(block, q_off, |j| {
                        let s = dot(qrow, &k.row(j)[hcols.clone()]) * scale;
                        row_keys.push(j);
                        row_logits.push(s);
                        if s > m {
                            m = s;
                        }
                    });
                }
                if row_keys.is_empty() {
                    return Err(Error::EmptyQueryRow { row: i });
                }
                let mut z = T::zero();
                for s in row_logits.iter_mut() {
                    *s = (*s - m).exp();
                    z = z + *s;
                }
                let grow = &g.row(i)[hcols.clone()];
                let orow = &out.row(i)[hcols.clone()];
                let go = dot(grow, orow);
                for (&j, &e) in row_keys.iter().zip(row_logits.iter()) {
                    let p = e / z;
                    let vrow = &v.row(j)[hcols.clone()];
                    let gv = dot(grow, vrow);
                    let ds = p * (gv - go) * scale;
                    {
                        let dvrow = &mut dv.row_mut(j)[hcols.clone()];
                        for (acc, &gc) in dvrow.iter_mut().zip(grow) {
                            *acc = *acc + p * gc;
                        }
                    }
                    {
                        let krow_vals: Vec<T> = k.row(j)[hcols.clone()].to_vec();
                        let dqrow = &mut dq.row_mut(i)[hcols.clone()];
                        for (acc, &kc) in dqrow.iter_mut().zip(&krow_vals) {
                            *acc = *acc + ds * kc;
                        }
                    }
                    {
                        let qrow_vals: Vec<T> = q.row(i)[hcols.clone()].to_vec();
                        let dkrow = &mut dk.row_mut(j)[hcols.clone()];
                        for (acc, &qc) in dkrow.iter_mut().zip(&qrow_vals) {
                            *acc = *acc + ds * qc;
                        }
                    }
                }
            }
        }
    }
    let _ = l;
    Ok((dq, dk, dv))
}

// ---------------------------------------------------------------------------
// Finite-difference checking
// ---------------------------------------------------------------------------

/// Builder of a scalar-valued computation over parameter nodes. Called once
/// per evaluation; must register exactly one input per parameter, in order.
pub type BuildFn = dyn Fn(&mut Tape<f64>, &[VarId]) -> Result<VarId>;

/// Outcome of one finite-difference comparison.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub elements_checked: usize,
}

/// Elements agreeing within this absolute slack are accepted regardless of
/// relative error (guards zero gradients against fd roundoff noise).
const FD_ABS_FLOOR: f64 = 1e-7;

fn eval_scalar(build: &BuildFn, params: &[Tensor<f64>]) -> Result<f64> {
    let mut tape = Tape::new();
    let ids: Vec<VarId> = params.iter().map(|p| tape.input(p.clone())).collect();
    let loss = build(&mut tape, &ids)?;
    Ok(tape.value(loss).data()[0])
}

/// Analytic gradients of `build` at `params`.
pub fn grad(build: &BuildFn, params: &[Tensor<f64>]) -> Result<(f64, Vec<Tensor<f64>>)> {
    let mut tape = Tape::new();
    let ids: Vec<VarId> = params.iter().map(|p| tape.input(p.clone())).collect();
    let loss = build(&mut tape, &ids)?;
    let value = tape.value(loss).data()[0];
    let grads = tape.backward(loss)?;
    let out = ids
        .iter()
        .zip(params)
        .map(|(&id, p)| grads.wrt(id, p))
        .collect();
    Ok((value, out))
}

/// Central-difference check of every parameter element against the
/// analytic gradient: `(f(x+h) - f(x-h)) / 2h` at fp64.
pub fn fd_check(build: &BuildFn, params: &[Tensor<f64>], h: f64) -> Result<FdReport> {
    if !(h > 0.0) {
        return Err(Error::InvalidParameter(format!("h must be > 0, got {h}")));
    }
    let (_, analytic) = grad(build, params)?;
    let mut max_rel: f64 = 0.0;
    let mut checked = 0;
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        for e in 0..param.len() {
            let orig = param.data()[e];
            work[pi].data_mut()[e] = orig + h;
            let up = eval_scalar(build, &work)?;
            work[pi].data_mut()[e] = orig - h;
            let down = eval_scalar(build, &work)?;
            work[pi].data_mut()[e] = orig;
            let fd = (up - down) / (2.0 * h);
            let a = analytic[pi].data()[e];
            let diff = (a - fd).abs();
            let rel = if diff <= FD_ABS_FLOOR {
                0.0
            } else {
                diff / a.abs().max(fd.abs())
            };
            max_rel = max_rel.max(rel);
            checked += 1;
        }
    }
    Ok(FdReport {
        max_rel_err: max_rel,
        elements_checked: checked,
    })
}

// ---------------------------------------------------------------------------
// Gradient-check suite
// ---------------------------------------------------------------------------

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const GRADCHECK_STEP: f64 = 1e-3;
pub const GRADCHECK_INSTANCES: usize = 20;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct GradCheckResult {
    pub name: String,
    pub instances: usize,
    pub max_rel_err: f64,
    pub pass: bool,
}

fn check_many(
    name: &str,
    instances: usize,
    mut make: impl FnMut(u64) -> (Box<BuildFn>, Vec<Tensor<f64>>),
) -> GradCheckResult {
    let mut worst: f64 = 0.0;
    for seed in 0..instances as u64 {
        let (build, params) = make(seed);
        let report = fd_check(build.as_ref(), &params, GRADCHECK_STEP)
            .unwrap_or_else(|e| panic!("fd_check {name} failed: {e}"));
        worst = worst.max(report.max_rel_err);
    }
    GradCheckResult {
        name: name.to_string(),
        instances,
        max_rel_err: worst,
        pass: worst <= GRADCHECK_TOLERANCE,
    }
}

/// Weighted-sum head: `sum(out * w)` with a fixed random non-parameter
/// weight, so the loss depends on every output element distinctly.
fn weighted_sum(tape: &mut Tape<f64>, out: VarId, w: &Tensor<f64>) -> Result<VarId> {
    let wid = tape.input(w.clone());
    let prod = tape.mul(out, wid)?;
    Ok(tape.sum(prod))
}

/// Finite-difference coverage of every registered primitive plus the
/// attention kernels on their mask variants.
pub fn gradcheck_primitives(instances: usize) -> Vec<GradCheckResult> {
    use crate::layout::{build_mask, Grid, MaskMode, ModalityLayout};
    use crate::rng::{normal_tensor, Rng};

    let mut results = Vec::new();

    results.push(check_many("matmul", instances, |seed| {
        let mut rng = Rng::new(seed * 31 + 1);
        let a = normal_tensor::<f64>(&mut rng, &[3, 4]);
        let b = normal_tensor::<f64>(&mut rng, &[4, 2]);
        let w = normal_tensor::<f64>(&mut rng, &[3, 2]);
        (
            Box::new(move |t: &mut Tape<f64>, p: &[VarId]| {
                let c = t.matmul(p[0], p[1])?;
                weighted_sum(t, c, &w)
            }),
            vec![a, b],
        )
    }));

    results.push(check_many("add_sub_mul_scale", instances, |seed| {
        let mut rng = Rng::new(seed * 31 + 2);
        let a = normal_tensor::<f64>(&mut rng, &[3, 3]);
        let b = normal_tensor::<f64>(&mut rng, &[3, 3]);
        let w = normal_tensor::<f64>(&mut rng, &[3, 3]);
        (
            Box::new(move |t: &mut Tape<f64>, p: &[VarId]| {
                let s = t.add(p[0], p[1])?;
                let d = t.sub(s, p[1])?;
                let m = t.mul(d, p[1])?;
                let sc = t.scale(m, 0.7);
                weighted_sum(t, sc, &w)
            }),
            vec![a, b],
        )
    }));

    results.push(check_many("add_row_bias", instances, |seed| {
        let mut rng = Rng::new(seed * 31 + 3);
        let x = normal_tensor::<f64>(&mut rng, &[4, 3]);
        let b = normal_tensor::<f64>(&mut rng, &[1, 3]);
        let w = normal_tensor::<f64>(&mut rng, &[4, 3]);
        (
            Box::new(move |t: &mut Tape<f64>, p: &[VarId]| {
                let y = t.add_row_bias(p[0], p[1])?;
                weighted_sum(t, y, &w)
            }),
            vec![x, b],
        )
    }));

    results.push(check_many("silu", instances, |seed| {
        let mut rng = Rng::new(seed * 31 + 4);
        let x = normal_tensor::<f64>(&mut rng, &[3, 5]);
        let w = normal_tensor::<f64>(&mut rng, &[3, 5]);
        (
            Box::new(move |t: &mut Tape<f64>, p: &[VarId]| {
                let y = t.silu(p[0]);
                weighted_sum(t, y, &w)
            }),
            vec![x],
        )
    }));

    results.push(check_many("rms_norm", instances, |seed| {
        let mut rng = Rng::new(seed * 31 + 5);
        let x = normal_tensor::<f64>(&mut rng, &[4, 6]);
        let gain = normal_tensor::<f64>(&mut rng, &[1, 6]);
        let w = normal_tensor::<f64>(&mut rng, &[4, 6]);
        (
            Box::new(move |t: &mut Tape<f64>, p: &[VarId]| {
                let y = t.rms_norm(p[0], p[1])?;
                weighted_sum(t, y, &w)
            }),
            vec![x, gain],
        )
    }));

    results.push(check_many("softmax_rows", instances, |seed| {
        let mut rng = Rng::new(seed * 31 + 6);
        let x = normal_tensor::<f64>(&mut rng, &[3, 5]);
        let w = normal_tensor::<f64>(&mut rng, &[3, 5]);
        (
            Box::new(move |t: &mut Tape<f64>, p: &[VarId]| {
                let y = t.softmax_rows(p[0]);
                weighted_sum(t, y, &w)
            }),
            vec![x],
        )
    }));

    results.push(check_many("gather_concat_slice", instances, |seed| {
        let mut rng = Rng::new(seed * 31 + 7);
        let x = normal_tensor::<f64>(&mut rng, &[5, 3]);
        let w = normal_tensor::<f64>(&mut rng, &[4, 3]);
        (
            Box::new(move |t: &mut Tape<f64>, p: &[VarId]| {
                let g = t.gather_rows(p[0], vec![0, 2, 2, 4])?;
                let s = t.slice_rows(g, 1, 2)?;
                let c = t.concat_rows(&[s, s])?;
                weighted_sum(t, c, &w)
            }),
            vec![x],
        )
    }));

    // Attention kernels over their mask variants.
    let attn_case = |name: &str, mask_builder: fn(&mut Rng) -> Rc<AttentionMaskSpec>| {
        let name = name.to_string();
        move |instances: usize| -> GradCheckResult {
            check_many(&name, instances, |seed| {
                let mut rng = Rng::new(seed * 131 + 17);
                let spec = mask_builder(&mut rng);
                let l = spec.layout().total_len();
                let heads = 2;
                let d = 3;
                let q = crate::rng::normal_tensor::<f64>(&mut rng, &[l, heads * d]);
                let k = crate::rng::normal_tensor::<f64>(&mut rng, &[l, heads * d]);
                let v = crate::rng::normal_tensor::<f64>(&mut rng, &[l, heads * d]);
                let w = crate::rng::normal_tensor::<f64>(&mut rng, &[l, heads * d]);
                let backend = if seed % 2 == 0 {
                    AttentionBackend::SparseMerged
                } else {
                    AttentionBackend::DenseOracle
                };
                (
                    Box::new(move |t: &mut Tape<f64>, p: &[VarId]| {
                        let out = t.attention(p[0], p[1], p[2], spec.clone(), heads, backend)?;
                        weighted_sum(t, out, &w)
                    }) as Box<BuildFn>,
                    vec![q, k, v],
                )
            })
        }
    };

    fn layout_small(rng: &mut Rng) -> ModalityLayout {
        let m = 2 + rng.next_below(2);
        ModalityLayout::with_congruent_spatial(m, Grid::new(2, 2), 1, vec![3], vec![0]).unwrap()
    }

    results.push(attn_case("attention_dense_full", |rng| {
        Rc::new(build_mask(&layout_small(rng), MaskMode::DenseFull, None).unwrap())
    })(instances));

    results.push(attn_case("attention_paa", |rng| {
        Rc::new(build_mask(&layout_small(rng), MaskMode::Pka, None).unwrap())
    })(instances));

    results.push(attn_case("attention_band", |rng| {
        Rc::new(build_mask(&layout_small(rng), MaskMode::Band(3), None).unwrap())
    })(instances));

    results.push(attn_case("attention_ksa_fixed_mask", |rng| {
        let layout = layout_small(rng);
        let n = layout.image_len();
        let mut active: Vec<bool> = (0..n).map(|_| rng.next_f64() < 0.5).collect();
        active[0] = true;
        let mask = crate::attn::sparse::KeywordMask::from_active(
            active,
            0,
            0.2,
            crate::attn::sparse::MaskNormalization::SoftmaxOverImage,
        );
        Rc::new(build_mask(&layout, MaskMode::Pka, Some(mask)).unwrap())
    })(instances));

    results
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{build_mask, Grid, MaskMode, ModalityLayout};
    use crate::rng::{normal_tensor, Rng};

    #[test]
    fn sum_gradient_is_ones() {
        let mut rng = Rng::new(1);
        let x = normal_tensor::<f64>(&mut rng, &[3, 4]);
        let (_, grads) = grad(
            &|t: &mut Tape<f64>, p: &[VarId]| Ok(t.sum(p[0])),
            &[x.clone()],
        )
        .unwrap();
        for &g in grads[0].data() {
            assert_eq!(g, 1.0);
        }
    }

    #[test]
    fn sum_of_softmax_has_zero_gradient() {
        // Row sums of a softmax are constant, so the map is locally flat.
        let mut rng = Rng::new(2);
        let x = normal_tensor::<f64>(&mut rng, &[3, 4]);
        let (value, grads) = grad(
            &|t: &mut Tape<f64>, p: &[VarId]| {
                let y = t.softmax_rows(p[0]);
                Ok(t.sum(y))
            },
            &[x],
        )
        .unwrap();
        assert!((value - 3.0).abs() < 1e-12);
        for &g in grads[0].data() {
            assert!(g.abs() < 1e-12);
        }
    }

    #[test]
    fn quadratic_matches_exact_gradient() {
        let x = Tensor::from_rows(&[vec![1.0_f64, 2.0]]).unwrap();
        let build = |t: &mut Tape<f64>, p: &[VarId]| {
            let sq = t.mul(p[0], p[0])?;
            Ok(t.sum(sq))
        };
        let (value, grads) = grad(&build, &[x.clone()]).unwrap();
        assert!((value - 5.0).abs() < 1e-12);
        assert!((grads[0].data()[0] - 2.0).abs() < 1e-12);
        assert!((grads[0].data()[1] - 4.0).abs() < 1e-12);
        let report = fd_check(&build, &[x], 1e-3).unwrap();
        assert!(report.max_rel_err <= 1e-6, "O(h^2) on a quadratic");
    }

    #[test]
    fn reused_node_accumulates_gradient() {
        // Diamond: y = sum(x*x) exercises one node feeding two parent slots.
        let mut rng = Rng::new(3);
        let x = normal_tensor::<f64>(&mut rng, &[2, 2]);
        let (_, grads) = grad(
            &|t: &mut Tape<f64>, p: &[VarId]| {
                let sq = t.mul(p[0], p[0])?;
                Ok(t.sum(sq))
            },
            &[x.clone()],
        )
        .unwrap();
        for (g, &v) in grads[0].data().iter().zip(x.data()) {
            assert!((g - 2.0 * v).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_attention_matches_finite_differences() {
        let layout =
            ModalityLayout::with_congruent_spatial(2, Grid::new(2, 2), 0, vec![], vec![0])
                .unwrap();
        let spec = Rc::new(build_mask(&layout, MaskMode::Pka, None).unwrap());
        let mut rng = Rng::new(5);
        let l = layout.total_len(); // 6 tokens
        let q = normal_tensor::<f64>(&mut rng, &[l, 4]);
        let k = normal_tensor::<f64>(&mut rng, &[l, 4]);
        let v = normal_tensor::<f64>(&mut rng, &[l, 4]);
        let build = move |t: &mut Tape<f64>, p: &[VarId]| {
            let out = t.attention(p[0], p[1], p[2], spec.clone(), 2, AttentionBackend::SparseMerged)?;
            Ok(t.sum(out))
        };
        let report = fd_check(&build, &[q, k, v], 1e-3).unwrap();
        assert!(report.max_rel_err <= 1e-4, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn backends_share_one_gradient_path() {
        let layout =
            ModalityLayout::with_congruent_spatial(2, Grid::new(2, 2), 1, vec![2], vec![1])
                .unwrap();
        let spec = Rc::new(build_mask(&layout, MaskMode::Pka, None).unwrap());
        let mut rng = Rng::new(6);
        let l = layout.total_len();
        let q = normal_tensor::<f64>(&mut rng, &[l, 4]);
        let k = normal_tensor::<f64>(&mut rng, &[l, 4]);
        let v = normal_tensor::<f64>(&mut rng, &[l, 4]);
        let mk = |backend: AttentionBackend| {
            let spec = spec.clone();
            move |t: &mut Tape<f64>, p: &[VarId]| {
                let out = t.attention(p[0], p[1], p[2], spec.clone(), 1, backend)?;
                Ok(t.sum(out))
            }
        };
        let (_, g_sparse) = grad(&mk(AttentionBackend::SparseMerged), &[q.clone(), k.clone(), v.clone()]).unwrap();
        let (_, g_dense) = grad(&mk(AttentionBackend::DenseOracle), &[q, k, v]).unwrap();
        for (a, b) in g_sparse.iter().zip(&g_dense) {
            assert!(a.max_abs_diff(b) <= 1e-10);
        }
    }

    #[test]
    fn keyword_mask_is_stop_gradient() {
        // The mask enters the node as a constant: rebuilding the tape with
        // different affinity tensors but the same thresholded mask leaves
        // values and gradients bitwise unchanged, and the mask registers no
        // tape node of its own.
        use crate::attn::sparse::{KeywordMask, MaskNormalization};
        let layout =
            ModalityLayout::with_congruent_spatial(2, Grid::new(2, 2), 0, vec![3], vec![0])
                .unwrap();
        let mask = KeywordMask::from_active(
            vec![true, false, true, false],
            0,
            0.2,
            MaskNormalization::SoftmaxOverImage,
        );
        let spec = Rc::new(build_mask(&layout, MaskMode::Pka, Some(mask)).unwrap());
        let mut rng = Rng::new(7);
        let l = layout.total_len();
        let q = normal_tensor::<f64>(&mut rng, &[l, 4]);
        let k = normal_tensor::<f64>(&mut rng, &[l, 4]);
        let v = normal_tensor::<f64>(&mut rng, &[l, 4]);

        let mut tape = Tape::new();
        let ids = [
            tape.input(q.clone()),
            tape.input(k.clone()),
            tape.input(v.clone()),
        ];
        let nodes_before = tape.len();
        let out = tape
            .attention(ids[0], ids[1], ids[2], spec.clone(), 1, AttentionBackend::SparseMerged)
            .unwrap();
        // Exactly one node added: the mask contributed no tape entries.
        assert_eq!(tape.len(), nodes_before + 1);

        let loss = tape.sum(out);
        let grads = tape.backward(loss).unwrap();
        let gq = grads.wrt(ids[0], &q);

        // Gradients agree with finite differences at the fixed mask.
        let spec2 = spec.clone();
        let build = move |t: &mut Tape<f64>, p: &[VarId]| {
            let out = t.attention(p[0], p[1], p[2], spec2.clone(), 1, AttentionBackend::SparseMerged)?;
            Ok(t.sum(out))
        };
        let report = fd_check(&build, &[q.clone(), k, v], 1e-3).unwrap();
        assert!(report.max_rel_err <= 1e-4);
        assert_eq!(gq.shape(), q.shape());
    }

    #[test]
    fn full_primitive_suite_passes() {
        for result in gradcheck_primitives(3) {
            assert!(
                result.pass,
                "{} rel err {}",
                result.name, result.max_rel_err
            );
        }
    }
}
