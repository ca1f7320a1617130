//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records every operation as it is evaluated. Nodes are only
//! ever appended, so creation order is a topological order and the backward
//! sweep simply walks the tape in reverse: each node is visited once, after
//! every node that consumed it.

use std::rc::Rc;

use rand::Rng;

use super::float::{gemm, Layout};
use super::{Float, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
struct MatDims {
    batch: usize,
    p: usize,
    q: usize,
    r: usize,
    /// Rhs is a single matrix shared by every batch item.
    shared_rhs: bool,
    /// Rhs is stored as `r×q` and used transposed.
    trans_rhs: bool,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// Rhs shape is a suffix of lhs shape.
    AddBroadcast(Var, Var),
    Scale(Var, T),
    MulConst(Var, Rc<Vec<T>>),
    /// Elementwise map with derivative captured during the forward pass.
    Map(Var, Vec<T>),
    MatMul(Var, Var, MatDims),
    SoftmaxRows(Var),
    BatchNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        training: bool,
    },
    SplitHeads(Var, usize),
    MergeHeads(Var, usize),
    ConcatLast(Vec<Var>),
    Reshape(Var),
    Sum(Var),
    MaskedMse {
        pred: Var,
        residual: Vec<T>,
        mask: Rc<Vec<bool>>,
        count: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Batch statistics produced by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance.
    pub var: Vec<T>,
    pub count: usize,
}

/// Normalization source for [`Graph::batch_norm`].
pub enum NormMode<'a, T> {
    /// Normalize with statistics of the current batch.
    Training,
    /// Normalize with stored running statistics.
    Inference { mean: &'a [T], var: &'a [T] },
}

/// Recorded computation.
pub struct Graph<T: Float> {
    nodes: Vec<Node<T>>,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable input.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(op, sa, sb));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    /// `a + b` where `b`'s shape equals the trailing dimensions of `a`
    /// (bias vectors, positional encodings).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(shape_err("add_broadcast", sa, sb));
        }
        let tb = self.value(b).data();
        let inner = tb.len().max(1);
        let data = self
            .value(a)
            .data()
            .chunks(inner)
            .flat_map(|row| row.iter().zip(tb).map(|(&x, &y)| x + y))
            .collect();
        let v = Tensor::new(sa.to_vec(), data)?;
        Ok(self.push(v, Op::AddBroadcast(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c), &[a])
    }

    /// Multiply by a constant, same-shaped factor (used for dropout masks).
    pub fn mul_const(&mut self, a: Var, factor: Rc<Vec<T>>) -> Result<Var> {
        let ta = self.value(a);
        if factor.len() != ta.len() {
            return Err(shape_err("mul_const", ta.shape(), &[factor.len()]));
        }
        let data = ta.data().iter().zip(factor.iter()).map(|(&x, &f)| x * f).collect();
        let v = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(v, Op::MulConst(a, factor), &[a]))
    }

    /// Elementwise `f` with derivative `df`, both evaluated at the input.
    pub fn map(&mut self, a: Var, f: impl Fn(T) -> T, df: impl Fn(T) -> T) -> Var {
        let ta = self.value(a);
        let v = ta.map(&f);
        let d = ta.data().iter().map(|&x| df(x)).collect();
        self.push(v, Op::Map(a, d), &[a])
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, gelu, gelu_grad)
    }

    /// Inverted dropout. Identity when not training or when `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        a: Var,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Param(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(a);
        }
        let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
        let factor: Vec<T> = (0..self.value(a).len())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        self.mul_const(a, Rc::new(factor))
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_rhs: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let name = if trans_rhs { "matmul_nt" } else { "matmul" };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err(name, &sa, &sb));
        }
        let (p, q) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (bq, r) = if trans_rhs {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        let batch_a = &sa[..sa.len() - 2];
        let batch_b = &sb[..sb.len() - 2];
        let shared_rhs = batch_b.is_empty();
        if bq != q || (!shared_rhs && batch_a != batch_b) {
            return Err(shape_err(name, &sa, &sb));
        }
        let dims = MatDims {
            batch: batch_a.iter().product(),
            p,
            q,
            r,
            shared_rhs,
            trans_rhs,
        };
        let mut out = vec![T::zero(); dims.batch * p * r];
        mm_forward(self.value(a).data(), self.value(b).data(), &mut out, dims);
        let mut shape = batch_a.to_vec();
        shape.extend([p, r]);
        let v = Tensor::new(shape, out)?;
        Ok(self.push(v, Op::MatMul(a, b, dims), &[a, b]))
    }

    /// Matrix product over the last two axes. The rhs is either a single
    /// matrix (broadcast over the lhs batch) or has the same batch shape.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` over the last two axes.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    /// Softmax along the last axis, with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let Some(&cols) = ta.shape().last() else {
            return Err(shape_err("softmax_rows", ta.shape(), &[]));
        };
        let mut data = ta.data().to_vec();
        if cols > 0 {
            for row in data.chunks_mut(cols) {
                softmax_in_place(row);
            }
        }
        let v = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(v, Op::SoftmaxRows(a), &[a]))
    }

    /// Batch normalization per feature (last axis) over all leading axes.
    ///
    /// Returns the batch statistics in training mode so that the caller can
    /// update its running estimates.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        mode: NormMode<'_, T>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let sx = self.shape(x).to_vec();
        let Some(&d) = sx.last() else {
            return Err(shape_err("batch_norm", &sx, &[]));
        };
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(shape_err("batch_norm", &sx, self.shape(gain)));
        }
        let rows = if d == 0 { 0 } else { self.value(x).len() / d };
        let eps = T::from_f64_lossy(eps);
        let xs = self.value(x).data();
        let (mean, var, training) = match mode {
            NormMode::Training => {
                if rows < 2 {
                    return Err(Error::Param(format!(
                        "batch norm needs at least 2 rows in training mode, got {rows}"
                    )));
                }
                let n = T::from_usize(rows).unwrap();
                let mut mean = vec![T::zero(); d];
                for row in xs.chunks(d) {
                    for (m, &v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m = *m / n);
                let mut var = vec![T::zero(); d];
                for row in xs.chunks(d) {
                    for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s = *s / n);
                (mean, var, true)
            }
            NormMode::Inference { mean, var } => {
                if mean.len() != d || var.len() != d {
                    return Err(shape_err("batch_norm", &sx, &[mean.len()]));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| (v + eps).sqrt().recip()).collect();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = Vec::with_capacity(xs.len());
        let mut out = Vec::with_capacity(xs.len());
        for row in xs.chunks(d.max(1)) {
            for j in 0..row.len() {
                let h = (row[j] - mean[j]) * inv_std[j];
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let v = Tensor::new(sx, out)?;
        let var_out = self.push(
            v,
            Op::BatchNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
                training,
            },
            &[x, gain, bias],
        );
        let stats = training.then_some(BatchStats {
            mean,
            var,
            count: rows,
        });
        Ok((var_out, stats))
    }

    /// `[N, T, H·d] → [N, H, T, d]`.
    pub fn split_heads(&mut self, a: Var, heads: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 || heads == 0 || s[2] % heads != 0 {
            return Err(shape_err("split_heads", &s, &[heads]));
        }
        let (n, t, d) = (s[0], s[1], s[2] / heads);
        let src = self.value(a).data();
        let mut out = vec![T::zero(); src.len()];
        for ni in 0..n {
            for ti in 0..t {
                for h in 0..heads {
                    let from = (ni * t + ti) * heads * d + h * d;
                    let to = ((ni * heads + h) * t + ti) * d;
                    out[to..to + d].copy_from_slice(&src[from..from + d]);
                }
            }
        }
        let v = Tensor::new(vec![n, heads, t, d], out)?;
        Ok(self.push(v, Op::SplitHeads(a, heads), &[a]))
    }

    /// `[N, H, T, d] → [N, T, H·d]`, i.e. concatenation of head outputs
    /// along the feature axis.
    pub fn merge_heads(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 {
            return Err(shape_err("merge_heads", &s, &[]));
        }
        let (n, heads, t, d) = (s[0], s[1], s[2], s[3]);
        let src = self.value(a).data();
        let mut out = vec![T::zero(); src.len()];
        for ni in 0..n {
            for h in 0..heads {
                for ti in 0..t {
                    let from = ((ni * heads + h) * t + ti) * d;
                    let to = (ni * t + ti) * heads * d + h * d;
                    out[to..to + d].copy_from_slice(&src[from..from + d]);
                }
            }
        }
        let v = Tensor::new(vec![n, t, heads * d], out)?;
        Ok(self.push(v, Op::MergeHeads(a, heads), &[a]))
    }

    /// Concatenate along the last axis; all leading dimensions must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Param("concat of zero tensors".into()));
        };
        let s0 = self.shape(first).to_vec();
        if s0.is_empty() {
            return Err(shape_err("concat_last", &s0, &[]));
        }
        let lead = &s0[..s0.len() - 1];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != s0.len() || &s[..s.len() - 1] != lead {
                return Err(shape_err("concat_last", &s0, s));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let v = Tensor::new(shape, out)?;
        Ok(self.push(v, Op::ConcatLast(parts.to_vec()), parts))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape.to_vec())?;
        Ok(self.push(v, Op::Reshape(a), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Mean squared error restricted to cells where `mask` is true:
    /// `Σ_masked (pred − target)² / |masked|`.
    pub fn masked_mse(&mut self, pred: Var, target: &Tensor<T>, mask: Rc<Vec<bool>>) -> Result<Var> {
        let tp = self.value(pred);
        if tp.shape() != target.shape() || mask.len() != tp.len() {
            return Err(shape_err("masked_mse", tp.shape(), target.shape()));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Param("masked_mse over an empty mask".into()));
        }
        let residual: Vec<T> = tp
            .data()
            .iter()
            .zip(target.data())
            .zip(mask.iter())
            .map(|((&p, &t), &m)| if m { p - t } else { T::zero() })
            .collect();
        let sq: T = residual.iter().map(|&r| r * r).sum();
        let loss = sq / T::from_usize(count).unwrap();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::MaskedMse {
                pred,
                residual,
                mask,
                count,
            },
            &[pred],
        ))
    }

    /// Reverse sweep from a single-element output.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        let out = self.value(output);
        if out.len() != 1 {
            return Err(shape_err("backward", out.shape(), &[]));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[output.0] = Some(vec![T::one()]);
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.filter(|_| self.nodes[i].requires_grad)
                    .map(|g| Tensor::new(self.nodes[i].value.shape().to_vec(), g).expect("grad shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = self.acc(grads, v) {
                        d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
                }
                if let Some(d) = self.acc(grads, *b) {
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d -= g);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(d) = self.acc(grads, *a) {
                    for ((d, &g), &y) in d.iter_mut().zip(g).zip(vb) {
                        *d += g * y;
                    }
                }
                if let Some(d) = self.acc(grads, *b) {
                    for ((d, &g), &x) in d.iter_mut().zip(g).zip(va) {
                        *d += g * x;
                    }
                }
            }
            Op::AddBroadcast(a, b) => {
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
                }
                let inner = self.value(*b).len().max(1);
                if let Some(d) = self.acc(grads, *b) {
                    for row in g.chunks(inner) {
                        d.iter_mut().zip(row).for_each(|(d, &g)| *d += g);
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d += g * *c);
                }
            }
            Op::MulConst(a, f) => {
                if let Some(d) = self.acc(grads, *a) {
                    for ((d, &g), &f) in d.iter_mut().zip(g).zip(f.iter()) {
                        *d += g * f;
                    }
                }
            }
            Op::Map(a, deriv) => {
                if let Some(d) = self.acc(grads, *a) {
                    for ((d, &g), &k) in d.iter_mut().zip(g).zip(deriv) {
                        *d += g * k;
                    }
                }
            }
            Op::MatMul(a, b, dims) => {
                if self.nodes[a.0].requires_grad {
                    let vb = self.value(*b).data();
                    let d = self.acc(grads, *a).unwrap();
                    mm_backward_lhs(g, vb, d, *dims);
                }
                if self.nodes[b.0].requires_grad {
                    let va = self.value(*a).data();
                    let d = self.acc(grads, *b).unwrap();
                    mm_backward_rhs(g, va, d, *dims);
                }
            }
            Op::SoftmaxRows(a) => {
                let y = node.value.data();
                let cols = *node.value.shape().last().unwrap();
                if let Some(d) = self.acc(grads, *a) {
                    if cols > 0 {
                        for ((dr, gr), yr) in d.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                            let dot: T = gr.iter().zip(yr).map(|(&g, &y)| g * y).sum();
                            for ((d, &g), &y) in dr.iter_mut().zip(gr).zip(yr) {
                                *d += y * (g - dot);
                            }
                        }
                    }
                }
            }
            Op::BatchNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
                training,
            } => {
                let d = inv_std.len();
                let rows = if d == 0 { 0 } else { xhat.len() / d };
                let mut sum_g = vec![T::zero(); d];
                let mut sum_gx = vec![T::zero(); d];
                for (gr, hr) in g.chunks(d.max(1)).zip(xhat.chunks(d.max(1))) {
                    for j in 0..gr.len() {
                        sum_g[j] += gr[j];
                        sum_gx[j] += gr[j] * hr[j];
                    }
                }
                if let Some(dg) = self.acc(grads, *gain) {
                    dg.iter_mut().zip(&sum_gx).for_each(|(d, &s)| *d += s);
                }
                if let Some(db) = self.acc(grads, *bias) {
                    db.iter_mut().zip(&sum_g).for_each(|(d, &s)| *d += s);
                }
                if self.nodes[x.0].requires_grad {
                    let gv = self.value(*gain).data().to_vec();
                    let dx = self.acc(grads, *x).unwrap();
                    if *training {
                        // dx = γ/σ · (g − mean(g) − x̂ · mean(g·x̂))
                        let n = T::from_usize(rows).unwrap();
                        for ((dr, gr), hr) in dx.chunks_mut(d).zip(g.chunks(d)).zip(xhat.chunks(d)) {
                            for j in 0..d {
                                let k = gv[j] * inv_std[j];
                                dr[j] += k * (gr[j] - sum_g[j] / n - hr[j] * sum_gx[j] / n);
                            }
                        }
                    } else {
                        for (dr, gr) in dx.chunks_mut(d.max(1)).zip(g.chunks(d.max(1))) {
                            for j in 0..gr.len() {
                                dr[j] += gr[j] * gv[j] * inv_std[j];
                            }
                        }
                    }
                }
            }
            Op::SplitHeads(a, heads) => {
                if let Some(d) = self.acc(grads, *a) {
                    let s = node.value.shape();
                    let (n, t, hd) = (s[0], s[2], s[3]);
                    for ni in 0..n {
                        for ti in 0..t {
                            for h in 0..*heads {
                                let to = (ni * t + ti) * heads * hd + h * hd;
                                let from = ((ni * heads + h) * t + ti) * hd;
                                for k in 0..hd {
                                    d[to + k] += g[from + k];
                                }
                            }
                        }
                    }
                }
            }
            Op::MergeHeads(a, heads) => {
                if let Some(d) = self.acc(grads, *a) {
                    let s = self.shape(*a);
                    let (n, t, hd) = (s[0], s[2], s[3]);
                    for ni in 0..n {
                        for h in 0..*heads {
                            for ti in 0..t {
                                let to = ((ni * heads + h) * t + ti) * hd;
                                let from = (ni * t + ti) * heads * hd + h * hd;
                                for k in 0..hd {
                                    d[to + k] += g[from + k];
                                }
                            }
                        }
                    }
                }
            }
            Op::ConcatLast(parts) => {
                let total = *node.value.shape().last().unwrap();
                let rows = if total == 0 { 0 } else { g.len() / total };
                let mut offset = 0;
                for &p in parts {
                    let w = *self.shape(p).last().unwrap();
                    if let Some(d) = self.acc(grads, p) {
                        for r in 0..rows {
                            for k in 0..w {
                                d[r * w + k] += g[r * total + offset + k];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::Reshape(a) => {
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
                }
            }
            Op::Sum(a) => {
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::MaskedMse {
                pred,
                residual,
                mask,
                count,
            } => {
                let k = g[0] * T::from_f64_lossy(2.0) / T::from_usize(*count).unwrap();
                if let Some(d) = self.acc(grads, *pred) {
                    for ((d, &r), &m) in d.iter_mut().zip(residual).zip(mask.iter()) {
                        if m {
                            *d += k * r;
                        }
                    }
                }
            }
        }
    }
}

/// Gradients from one backward sweep, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Gradients<T> {
    /// Gradient of the output with respect to `v`; `None` when `v` does not
    /// require a gradient or does not reach the output.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn mm_forward<T: Float>(a: &[T], b: &[T], c: &mut [T], d: MatDims) {
    let lb = |off: usize| {
        if d.trans_rhs {
            Layout::col_major(off, d.q)
        } else {
            Layout::row_major(off, d.r)
        }
    };
    if d.shared_rhs {
        let m = d.batch * d.p;
        gemm(m, d.q, d.r, a, Layout::row_major(0, d.q), b, lb(0), T::zero(), c, Layout::row_major(0, d.r));
        return;
    }
    for i in 0..d.batch {
        gemm(
            d.p,
            d.q,
            d.r,
            a,
            Layout::row_major(i * d.p * d.q, d.q),
            b,
            lb(i * d.q * d.r),
            T::zero(),
            c,
            Layout::row_major(i * d.p * d.r, d.r),
        );
    }
}

/// `dA += dC · op(B)ᵀ`.
fn mm_backward_lhs<T: Float>(dc: &[T], b: &[T], da: &mut [T], d: MatDims) {
    // op(B)ᵀ is r×q.
    let lbt = |off: usize| {
        if d.trans_rhs {
            Layout::row_major(off, d.q)
        } else {
            Layout::col_major(off, d.r)
        }
    };
    if d.shared_rhs {
        let m = d.batch * d.p;
        gemm(m, d.r, d.q, dc, Layout::row_major(0, d.r), b, lbt(0), T::one(), da, Layout::row_major(0, d.q));
        return;
    }
    for i in 0..d.batch {
        gemm(
            d.p,
            d.r,
            d.q,
            dc,
            Layout::row_major(i * d.p * d.r, d.r),
            b,
            lbt(i * d.q * d.r),
            T::one(),
            da,
            Layout::row_major(i * d.p * d.q, d.q),
        );
    }
}

/// `d op(B) += Aᵀ · dC`, written back through the storage layout of B.
fn mm_backward_rhs<T: Float>(dc: &[T], a: &[T], db: &mut [T], d: MatDims) {
    let ldb = |off: usize| {
        if d.trans_rhs {
            Layout::col_major(off, d.q)
        } else {
            Layout::row_major(off, d.r)
        }
    };
    if d.shared_rhs {
        let k = d.batch * d.p;
        gemm(d.q, k, d.r, a, Layout::col_major(0, d.q), dc, Layout::row_major(0, d.r), T::one(), db, ldb(0));
        return;
    }
    for i in 0..d.batch {
        gemm(
            d.q,
            d.p,
            d.r,
            a,
            Layout::col_major(i * d.p * d.q, d.q),
            dc,
            Layout::row_major(i * d.p * d.r, d.r),
            T::one(),
            db,
            ldb(i * d.q * d.r),
        );
    }
}

pub(crate) fn softmax_in_place<T: Float>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

fn std_normal_cdf<T: Float>(x: T) -> T {
    let half = T::from_f64_lossy(0.5);
    half * (T::one() + (x * T::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

pub(crate) fn gelu<T: Float>(x: T) -> T {
    x * std_normal_cdf(x)
}

pub(crate) fn gelu_grad<T: Float>(x: T) -> T {
    let pdf = (-(x * x) * T::from_f64_lossy(0.5)).exp()
        * T::from_f64_lossy(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    std_normal_cdf(x) + x * pdf
}
