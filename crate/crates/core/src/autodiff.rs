//! Eager reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation executed during one forward pass.
//! [`Graph::backward`] consumes the graph and walks the record in exact
//! reverse execution order, accumulating gradients additively into each
//! operand. Parameters are borrowed from the model, so building a graph
//! never copies weights.
//!
//! Every matmul increments a per-graph multiply-accumulate counter, which
//! the cost model uses as its measured-FLOPs oracle.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};

/// Variance epsilon used by [`Graph::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a tensor recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise operator for [`Graph::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// rhs is `l×1`, repeated across the columns of an `l×d` lhs.
    Column,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Binary(BinaryOp, Broadcast, Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    MeanPoolRows(Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Gather(Var, Vec<usize>),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    StraightThrough(Var),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Operation record for one forward pass.
#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    macs: u64,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when `var` does not require grad or is not reachable from the loss.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

fn erf_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gauss_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Exact (erf-form) GELU on a plain value.
pub fn gelu_scalar(x: f64) -> f64 {
    x * erf_cdf(x)
}

fn as_matrix(shape: &[usize]) -> Option<(usize, usize)> {
    (shape.len() == 2).then(|| (shape[0], shape[1]))
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulates executed by matmuls on this graph so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn flops(&self) -> u64 {
        2 * self.macs
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(
        &mut self,
        name: &'static str,
        value: Tensor,
        op: Op,
        requires_grad: bool,
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        Ok(self.push(Cow::Owned(value), op, requires_grad))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Borrowed trainable parameter.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, true)
    }

    /// Borrowed tensor that never receives gradient.
    pub fn constant_ref(&mut self, t: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, false)
    }

    /// Owned tensor that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    /// Owned leaf that receives gradient.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        let (m, k, n) = match (as_matrix(sa), as_matrix(sb)) {
            (Some((m, k)), Some((k2, n))) if k == k2 => (m, k, n),
            _ => return Err(Error::shape("matmul", sa, sb)),
        };
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.macs += (m * k * n) as u64;
        let rg = self.rg(a) || self.rg(b);
        self.push_checked(
            "matmul",
            Tensor::new(vec![m, n], out)?,
            Op::MatMul(a, b),
            rg,
        )
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (m, n) = as_matrix(x.shape()).ok_or_else(|| Error::shape("transpose", x.shape(), &[]))?;
        let src = x.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.rg(a);
        self.push_checked("transpose", Tensor::new(vec![n, m], out)?, Op::Transpose(a), rg)
    }

    /// Elementwise `a op b`; `b` may be an `l×1` column broadcast across `a`'s columns.
    pub fn elementwise(&mut self, a: Var, b: Var, op: BinaryOp) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let bc = if ta.shape() == tb.shape() {
            Broadcast::Same
        } else if tb.shape().len() == 2
            && ta.shape().len() == 2
            && tb.shape()[1] == 1
            && tb.shape()[0] == ta.shape()[0]
        {
            Broadcast::Column
        } else {
            return Err(Error::shape("elementwise", ta.shape(), tb.shape()));
        };
        let f = |x: f64, y: f64| match op {
            BinaryOp::Add => x + y,
            BinaryOp::Sub => x - y,
            BinaryOp::Mul => x * y,
        };
        let out: Vec<f64> = match bc {
            Broadcast::Same => ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::Column => {
                let d = ta.cols();
                ta.data()
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| f(x, tb.data()[i / d]))
                    .collect()
            }
        };
        let shape = ta.shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push_checked("elementwise", Tensor::new(shape, out)?, Op::Binary(op, bc, a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, BinaryOp::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, BinaryOp::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, BinaryOp::Mul)
    }

    /// `a[m×n] + b[1×n]` with `b` repeated over rows (bias add).
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let n = ta.cols();
        if ta.shape().len() != 2 || tb.numel() != n {
            return Err(Error::shape("add_row", ta.shape(), tb.shape()));
        }
        let out: Vec<f64> = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + tb.data()[i % n])
            .collect();
        let shape = ta.shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push_checked("add_row", Tensor::new(shape, out)?, Op::AddRow(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let t = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push_checked("scale", t, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let t = self.value(a).map(|x| x + s);
        let rg = self.rg(a);
        self.push_checked("add_scalar", t, Op::AddScalar(a), rg)
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.shape().len() != 2 {
            return Err(Error::shape("softmax_rows", x.shape(), &[]));
        }
        let out = softmax_rows_values(x);
        let rg = self.rg(a);
        self.push_checked("softmax_rows", out, Op::SoftmaxRows(a), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let d = tx.cols();
        if tx.shape().len() != 2 || tg.numel() != d || tb.numel() != d {
            return Err(Error::shape("layer_norm", tx.shape(), tg.shape()));
        }
        let l = tx.rows();
        let mut xhat = vec![0.0; l * d];
        let mut rstd = vec![0.0; l];
        let mut out = vec![0.0; l * d];
        for r in 0..l {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = h * tg.data()[c] + tb.data()[c];
            }
        }
        let shape = tx.shape().to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push_checked(
            "layer_norm",
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        )
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(gelu_scalar);
        let rg = self.rg(a);
        self.push_checked("gelu", t, Op::Gelu(a), rg)
    }

    /// Column means of an `l×d` matrix as a `1×d` row.
    pub fn mean_pool_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.shape().len() != 2 {
            return Err(Error::shape("mean_pool_rows", x.shape(), &[]));
        }
        let (l, d) = (x.rows(), x.cols());
        let mut out = vec![0.0; d];
        for r in 0..l {
            for (o, v) in out.iter_mut().zip(x.row(r)) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= l as f64;
        }
        let rg = self.rg(a);
        self.push_checked("mean_pool_rows", Tensor::new(vec![1, d], out)?, Op::MeanPoolRows(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum::<f64>();
        let rg = self.rg(a);
        self.push_checked("sum", Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let s = x.data().iter().sum::<f64>() / x.numel() as f64;
        let rg = self.rg(a);
        self.push_checked("mean", Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Mean negative log-softmax of the labelled class.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let x = self.value(logits);
        let (b, c) = as_matrix(x.shape()).ok_or_else(|| Error::shape("cross_entropy", x.shape(), &[]))?;
        if labels.len() != b {
            return Err(Error::Input(format!(
                "cross_entropy: {} labels for {b} rows",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::Input(format!(
                "cross_entropy: label {bad} out of range for {c} classes"
            )));
        }
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        for r in 0..b {
            let row = x.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + z.ln();
            loss += lse - row[labels[r]];
            for k in 0..c {
                probs[r * c + k] = (row[k] - max).exp() / z;
            }
        }
        let rg = self.rg(logits);
        self.push_checked(
            "cross_entropy",
            Tensor::scalar(loss / b as f64),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// `out.flat[i] = a.flat[indices[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, a: Var, indices: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        let x = self.value(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= x.numel()) {
            return Err(Error::Input(format!(
                "gather: index {bad} out of range for {:?}",
                x.shape()
            )));
        }
        let out: Vec<f64> = indices.iter().map(|&i| x.data()[i]).collect();
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(a);
        self.push_checked("gather", t, Op::Gather(a, indices), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        let (m, n) = as_matrix(x.shape()).ok_or_else(|| Error::shape("slice_cols", x.shape(), &[]))?;
        if len == 0 || start + len > n {
            return Err(Error::shape("slice_cols", x.shape(), &[start, len]));
        }
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&x.row(r)[start..start + len]);
        }
        let rg = self.rg(a);
        self.push_checked(
            "slice_cols",
            Tensor::new(vec![m, len], out)?,
            Op::SliceCols { x: a, start },
            rg,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.value(parts[0]).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if t.shape().len() != 2 || t.rows() != m {
                return Err(Error::shape("concat_cols", self.value(parts[0]).shape(), t.shape()));
            }
            widths.push(t.cols());
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push_checked(
            "concat_cols",
            Tensor::new(vec![m, n], out)?,
            Op::ConcatCols(parts.to_vec()),
            rg,
        )
    }

    /// Emits `hard` numerically while routing the incoming gradient to `soft` unchanged.
    pub fn straight_through(&mut self, hard: Tensor, soft: Var) -> Result<Var> {
        if hard.shape() != self.value(soft).shape() {
            return Err(Error::shape("straight_through", hard.shape(), self.value(soft).shape()));
        }
        let rg = self.rg(soft);
        self.push_checked("straight_through", hard, Op::StraightThrough(soft), rg)
    }

    /// Reverse sweep from a scalar `loss`. Consumes the graph.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let (lo, hi) = grads.split_at_mut(i);
            let Some(g) = hi[0].as_deref() else { continue };
            let node = &self.nodes[i];
            self.backprop_node(node, g, lo);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                g.filter(|_| node.requires_grad)
                    .map(|g| Tensor::new(node.value.shape().to_vec(), g).expect("grad shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node<'a>, g: &[f64], lo: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| -> &Tensor { &nodes[v.0].value };
        let rg = |v: Var| nodes[v.0].requires_grad;
        fn acc<'s>(lo: &'s mut [Option<Vec<f64>>], v: Var, len: usize) -> &'s mut [f64] {
            lo[v.0].get_or_insert_with(|| vec![0.0; len])
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).rows(), val(*a).cols());
                let n = val(*b).cols();
                if rg(*a) {
                    let ga = acc(lo, *a, m * k);
                    gemm_nt(g, val(*b).data(), ga, m, n, k);
                }
                if rg(*b) {
                    let gb = acc(lo, *b, k * n);
                    gemm_tn(val(*a).data(), g, gb, m, k, n);
                }
            }
            Op::Transpose(a) => {
                if rg(*a) {
                    let (m, n) = (val(*a).rows(), val(*a).cols());
                    let ga = acc(lo, *a, m * n);
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::Binary(op, bc, a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let d = ta.cols();
                let bidx = |i: usize| match bc {
                    Broadcast::Same => i,
                    Broadcast::Column => i / d,
                };
                if rg(*a) {
                    let ga = acc(lo, *a, ta.numel());
                    match op {
                        BinaryOp::Add | BinaryOp::Sub => {
                            for (x, gi) in ga.iter_mut().zip(g) {
                                *x += gi;
                            }
                        }
                        BinaryOp::Mul => {
                            for (i, x) in ga.iter_mut().enumerate() {
                                *x += g[i] * tb.data()[bidx(i)];
                            }
                        }
                    }
                }
                if rg(*b) {
                    let gb = acc(lo, *b, tb.numel());
                    for (i, gi) in g.iter().enumerate() {
                        let c = match op {
                            BinaryOp::Add => *gi,
                            BinaryOp::Sub => -gi,
                            BinaryOp::Mul => gi * ta.data()[i],
                        };
                        gb[bidx(i)] += c;
                    }
                }
            }
            Op::AddRow(a, b) => {
                let n = val(*b).numel();
                if rg(*a) {
                    let ga = acc(lo, *a, g.len());
                    for (x, gi) in ga.iter_mut().zip(g) {
                        *x += gi;
                    }
                }
                if rg(*b) {
                    let gb = acc(lo, *b, n);
                    for (i, gi) in g.iter().enumerate() {
                        gb[i % n] += gi;
                    }
                }
            }
            Op::Scale(a, s) => {
                if rg(*a) {
                    let ga = acc(lo, *a, g.len());
                    for (x, gi) in ga.iter_mut().zip(g) {
                        *x += s * gi;
                    }
                }
            }
            Op::AddScalar(a) => {
                if rg(*a) {
                    let ga = acc(lo, *a, g.len());
                    for (x, gi) in ga.iter_mut().zip(g) {
                        *x += gi;
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                if rg(*a) {
                    let y = &node.value;
                    let d = y.cols();
                    let ga = acc(lo, *a, y.numel());
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = &g[r * d..(r + 1) * d];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..d {
                            ga[r * d + c] += yr[c] * (gr[c] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = val(*x).cols();
                let l = val(*x).rows();
                if rg(*gamma) {
                    let gg = acc(lo, *gamma, d);
                    for r in 0..l {
                        for c in 0..d {
                            gg[c] += g[r * d + c] * xhat[r * d + c];
                        }
                    }
                }
                if rg(*beta) {
                    let gb = acc(lo, *beta, d);
                    for r in 0..l {
                        for c in 0..d {
                            gb[c] += g[r * d + c];
                        }
                    }
                }
                if rg(*x) {
                    let gamma_v = val(*gamma).data().to_vec();
                    let gx = acc(lo, *x, l * d);
                    let mut dxhat = vec![0.0; d];
                    for r in 0..l {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for c in 0..d {
                            dxhat[c] = g[r * d + c] * gamma_v[c];
                            mean_d += dxhat[c];
                            mean_dx += dxhat[c] * xhat[r * d + c];
                        }
                        mean_d /= d as f64;
                        mean_dx /= d as f64;
                        for c in 0..d {
                            gx[r * d + c] +=
                                rstd[r] * (dxhat[c] - mean_d - xhat[r * d + c] * mean_dx);
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                if rg(*a) {
                    let x = val(*a).data();
                    let ga = acc(lo, *a, x.len());
                    for i in 0..x.len() {
                        ga[i] += g[i] * (erf_cdf(x[i]) + x[i] * gauss_pdf(x[i]));
                    }
                }
            }
            Op::MeanPoolRows(a) => {
                if rg(*a) {
                    let (l, d) = (val(*a).rows(), val(*a).cols());
                    let ga = acc(lo, *a, l * d);
                    let inv = 1.0 / l as f64;
                    for r in 0..l {
                        for c in 0..d {
                            ga[r * d + c] += g[c] * inv;
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if rg(*a) {
                    let n = val(*a).numel();
                    for x in acc(lo, *a, n) {
                        *x += g[0];
                    }
                }
            }
            Op::Mean(a) => {
                if rg(*a) {
                    let n = val(*a).numel();
                    let s = g[0] / n as f64;
                    for x in acc(lo, *a, n) {
                        *x += s;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if rg(*logits) {
                    let b = labels.len();
                    let c = probs.len() / b;
                    let gl = acc(lo, *logits, b * c);
                    let s = g[0] / b as f64;
                    for r in 0..b {
                        for k in 0..c {
                            let onehot = if labels[r] == k { 1.0 } else { 0.0 };
                            gl[r * c + k] += s * (probs[r * c + k] - onehot);
                        }
                    }
                }
            }
            Op::Gather(a, indices) => {
                if rg(*a) {
                    let n = val(*a).numel();
                    let ga = acc(lo, *a, n);
                    for (gi, &src) in g.iter().zip(indices) {
                        ga[src] += gi;
                    }
                }
            }
            Op::SliceCols { x, start } => {
                if rg(*x) {
                    let (m, n) = (val(*x).rows(), val(*x).cols());
                    let len = node.value.cols();
                    let gx = acc(lo, *x, m * n);
                    for r in 0..m {
                        for c in 0..len {
                            gx[r * n + start + c] += g[r * len + c];
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let n = node.value.cols();
                let m = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if rg(p) {
                        let gp = acc(lo, p, m * w);
                        for r in 0..m {
                            for c in 0..w {
                                gp[r * w + c] += g[r * n + offset + c];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::StraightThrough(soft) => {
                if rg(*soft) {
                    let gs = acc(lo, *soft, g.len());
                    for (x, gi) in gs.iter_mut().zip(g) {
                        *x += gi;
                    }
                }
            }
        }
    }
}

/// Row-wise stable softmax on a plain tensor.
pub fn softmax_rows_values(x: &Tensor) -> Tensor {
    let d = x.cols();
    let mut out = vec![0.0; x.numel()];
    for r in 0..x.rows() {
        let row = x.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for c in 0..d {
            let e = (row[c] - max).exp();
            out[r * d + c] = e;
            z += e;
        }
        for v in &mut out[r * d..(r + 1) * d] {
            *v /= z;
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_difference_check;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn matmul_by_hand() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = g.constant(Tensor::from_rows(&[&[5.0, 6.0, 7.0], &[8.0, 9.0, 10.0]]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[21.0, 24.0, 27.0, 47.0, 54.0, 61.0]);
        assert_eq!(g.macs(), 12);
        assert_eq!(g.flops(), 24);
        assert!(matches!(g.matmul(b, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn softmax_and_layer_norm_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[&[0.0, 2f64.ln()]]));
        let p = g.softmax_rows(x).unwrap();
        assert!(close(g.value(p).data(), &[1.0 / 3.0, 2.0 / 3.0], 1e-15));

        let y = g.constant(Tensor::from_rows(&[&[1.0, 2.0, 3.0]]));
        let gamma = g.constant(Tensor::full(&[1, 3], 1.0));
        let beta = g.constant(Tensor::zeros(&[1, 3]));
        let n = g.layer_norm(y, gamma, beta).unwrap();
        let s = (2.0 / 3.0 + LAYER_NORM_EPS).sqrt();
        assert!(close(g.value(n).data(), &[-1.0 / s, 0.0, 1.0 / s], 1e-12));
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        // x·Φ(x) with Φ(1) = 0.841344746068543
        assert!((gelu_scalar(1.0) - 0.841344746068543).abs() < 1e-12);
        assert!((gelu_scalar(-1.0) + 0.158655253931457).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[1, 4]));
        let l = g.cross_entropy(z, &[2]).unwrap();
        assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-15);
        assert!(matches!(g.cross_entropy(z, &[4]), Err(Error::Input(_))));
    }

    #[test]
    fn column_broadcast_and_bias() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let m = g.constant(Tensor::from_rows(&[&[0.0], &[1.0]]));
        let b = g.constant(Tensor::from_rows(&[&[10.0, 20.0]]));
        let masked = g.mul(a, m).unwrap();
        assert_eq!(g.value(masked).data(), &[0.0, 0.0, 3.0, 4.0]);
        let biased = g.add_row(a, b).unwrap();
        assert_eq!(g.value(biased).data(), &[11.0, 22.0, 13.0, 24.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::zeros(&[2, 2]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn overflow_is_reported() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 1], 1e300));
        assert!(matches!(g.scale(x, 1e300), Err(Error::NonFinite { op: "scale" })));
    }

    #[test]
    fn unused_leaf_gets_no_gradient() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::scalar(2.0));
        let y = g.variable(Tensor::scalar(3.0));
        let l = g.mul(x, x).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 4.0);
        assert!(grads.get(y).is_none());
    }

    #[test]
    fn straight_through_passes_gradient_unchanged() {
        let mut g = Graph::new();
        let soft = g.variable(Tensor::from_rows(&[&[0.3], &[0.8]]));
        let hard = Tensor::from_rows(&[&[0.0], &[1.0]]);
        let st = g.straight_through(hard.clone(), soft).unwrap();
        assert_eq!(g.value(st), &hard);
        let w = g.constant(Tensor::from_rows(&[&[2.0], &[-5.0]]));
        let p = g.mul(st, w).unwrap();
        let l = g.sum(p).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(soft).unwrap().data(), &[2.0, -5.0]);
    }

    #[test]
    fn attention_like_chain_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::uniform(&[3, 4], -1.0, 1.0, &mut rng);
        let w = Tensor::uniform(&[4, 4], -1.0, 1.0, &mut rng);
        let err = finite_difference_check(
            |g, x| {
                let wv = g.constant(w.clone());
                let q = g.matmul(x, wv)?;
                let kt = g.transpose(x)?;
                let s = g.matmul(q, kt)?;
                let p = g.softmax_rows(s)?;
                let o = g.matmul(p, x)?;
                let h = g.gelu(o)?;
                let pooled = g.mean_pool_rows(h)?;
                g.cross_entropy(pooled, &[1])
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    fn tensor_strategy(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
        proptest::collection::vec(-5.0f64..5.0, rows * cols)
            .prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
    }

    proptest! {
        #[test]
        fn softmax_rows_are_distributions(x in tensor_strategy(4, 6)) {
            let p = softmax_rows_values(&x);
            for r in 0..4 {
                let s: f64 = p.row(r).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
                prop_assert!(p.row(r).iter().all(|&v| v > 0.0 && v <= 1.0));
            }
        }

        #[test]
        fn gradients_are_additive(x in tensor_strategy(3, 3), w in tensor_strategy(3, 3)) {
            let grad = |use_f: bool, use_g: bool| {
                let mut g = Graph::new();
                let xv = g.variable(x.clone());
                let wv = g.constant(w.clone());
                let mut terms = Vec::new();
                if use_f {
                    let y = g.matmul(xv, wv).unwrap();
                    let y = g.gelu(y).unwrap();
                    terms.push(g.sum(y).unwrap());
                }
                if use_g {
                    let s = g.softmax_rows(xv).unwrap();
                    let s = g.mul(s, wv).unwrap();
                    terms.push(g.mean(s).unwrap());
                }
                let loss = if terms.len() == 2 { g.add(terms[0], terms[1]).unwrap() } else { terms[0] };
                g.backward(loss).unwrap().get(xv).unwrap().clone()
            };
            let both = grad(true, true);
            let (f, h) = (grad(true, false), grad(false, true));
            for ((b, a), c) in both.data().iter().zip(f.data()).zip(h.data()) {
                prop_assert!((b - (a + c)).abs() <= 1e-12 * (1.0 + b.abs()));
            }
        }

        #[test]
        fn backward_is_deterministic(x in tensor_strategy(2, 5)) {
            let run = || {
                let mut g = Graph::new();
                let xv = g.variable(x.clone());
                let gamma = g.constant(Tensor::full(&[1, 5], 1.5));
                let beta = g.constant(Tensor::full(&[1, 5], -0.5));
                let n = g.layer_norm(xv, gamma, beta).unwrap();
                let l = g.cross_entropy(n, &[3, 0]).unwrap();
                g.backward(l).unwrap().get(xv).unwrap().clone()
            };
            prop_assert_eq!(run(), run());
        }
    }
}
