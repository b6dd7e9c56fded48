//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] is an append-only arena of nodes. Every operation pushes a
//! node holding its forward value and enough saved state to run its
//! vector-Jacobian product. [`Tape::backward`] sweeps the arena in reverse
//! and accumulates gradients into the leaves that require them; the buffers
//! keep accumulating across calls until [`Tape::zero_grad`].
//!
//! Only the operations the encoder and the losses need are provided.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    ScaleRows(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    GatherRows {
        table: Var,
        idx: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Sum(Var),
    Pick {
        x: Var,
        index: usize,
    },
    StraightThrough {
        soft: Var,
    },
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

/// Decomposition of a shape around one axis: `[outer, len, inner]`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    assert!(axis < shape.len(), "axis {axis} out of range for {shape:?}");
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn require_2d(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(Error::dim(op, t.shape(), &[0, 0])),
    }
}

fn softmax_into(x: &[f64], out: &mut [f64], shape: &[usize], axis: usize) {
    let (outer, len, inner) = axis_split(shape, axis);
    for o in 0..outer {
        for j in 0..inner {
            let at = |i: usize| (o * len + i) * inner + j;
            let max = (0..len).map(|i| x[at(i)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for i in 0..len {
                let e = (x[at(i)] - max).exp();
                out[at(i)] = e;
                total += e;
            }
            for i in 0..len {
                out[at(i)] /= total;
            }
        }
    }
}

fn log_softmax_into(x: &[f64], out: &mut [f64], shape: &[usize], axis: usize) {
    let (outer, len, inner) = axis_split(shape, axis);
    for o in 0..outer {
        for j in 0..inner {
            let at = |i: usize| (o * len + i) * inner + j;
            let max = (0..len).map(|i| x[at(i)]).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + (0..len).map(|i| (x[at(i)] - max).exp()).sum::<f64>().ln();
            for i in 0..len {
                out[at(i)] = x[at(i)] - lse;
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.push_arc(Arc::new(value), op, requires_grad)
    }

    fn push_arc(&mut self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that accumulates gradient.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A gradient-tracking leaf sharing storage with the caller.
    pub fn param(&mut self, value: Arc<Tensor>) -> Var {
        self.push_arc(value, Op::Leaf, true)
    }

    /// A detached leaf; never accumulates gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A detached leaf sharing storage with the caller.
    pub fn constant_shared(&mut self, value: Arc<Tensor>) -> Var {
        self.push_arc(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = require_2d("matmul", ta)?;
        let (k2, n) = require_2d("matmul", tb)?;
        if k != k2 {
            return Err(Error::dim("matmul", ta.shape(), tb.shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(ta.data(), tb.data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = require_2d("transpose", t)?;
        let src = t.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(a), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim("add", ta.shape(), tb.shape()));
        }
        let out: Vec<f64> = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = ta.shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Add(a, b), rg))
    }

    /// `x + bias` with `bias` of shape `[d]` broadcast over every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let d = tx.last_dim();
        if tb.shape() != [d] {
            return Err(Error::dim("add_bias", tx.shape(), tb.shape()));
        }
        let b = tb.data();
        let out: Vec<f64> = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[i % d])
            .collect();
        let shape = tx.shape().to_vec();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Tensor::new(shape, out)?, Op::AddBias(x, bias), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim("mul", ta.shape(), tb.shape()));
        }
        let out: Vec<f64> = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = ta.shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul(a, b), rg))
    }

    /// Scales row `i` of `x` (`[n, d]`) by `w[i]` (`w` has `n` elements).
    pub fn scale_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let d = tx.last_dim();
        let n = tx.rows();
        if tw.len() != n {
            return Err(Error::dim("scale_rows", tx.shape(), tw.shape()));
        }
        let wd = tw.data();
        let out: Vec<f64> = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * wd[i / d])
            .collect();
        let shape = tx.shape().to_vec();
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(Tensor::new(shape, out)?, Op::ScaleRows(x, w), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a);
        let out: Vec<f64> = t.data().iter().map(|v| v * s).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(a);
        self.push(
            Tensor::new(shape, out).expect("same shape"),
            Op::Scale(a, s),
            rg,
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out: Vec<f64> = t.data().iter().map(|&v| v.max(0.0)).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(a);
        self.push(
            Tensor::new(shape, out).expect("same shape"),
            Op::Relu(a),
            rg,
        )
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Var {
        let t = self.value(x);
        let mut out = vec![0.0; t.len()];
        softmax_into(t.data(), &mut out, t.shape(), axis);
        let shape = t.shape().to_vec();
        let rg = self.rg(x);
        self.push(
            Tensor::new(shape, out).expect("same shape"),
            Op::Softmax { x, axis },
            rg,
        )
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Var {
        let t = self.value(x);
        let mut out = vec![0.0; t.len()];
        log_softmax_into(t.data(), &mut out, t.shape(), axis);
        let shape = t.shape().to_vec();
        let rg = self.rg(x);
        self.push(
            Tensor::new(shape, out).expect("same shape"),
            Op::LogSoftmax { x, axis },
            rg,
        )
    }

    /// Normalizes each row over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let d = tx.last_dim();
        for p in [gain, bias] {
            if self.value(p).shape() != [d] {
                return Err(Error::dim("layer_norm", tx.shape(), self.value(p).shape()));
            }
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = tx.rows();
        let mut out = vec![0.0; tx.len()];
        let mut xhat = vec![0.0; tx.len()];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let shape = tx.shape().to_vec();
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Rows `idx` of a 2-D `table`, in order; repeats allowed.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (r, c) = require_2d("gather_rows", t)?;
        if idx.is_empty() {
            return Err(Error::Parameter(
                "gather_rows needs at least one index".into(),
            ));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::Input(format!("row {bad} out of range for {r} rows")));
        }
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(t.row(i));
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new(vec![idx.len(), c], out)?,
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Columns `start..start + len` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = require_2d("slice_cols", t)?;
        if len == 0 || start + len > c {
            return Err(Error::Parameter(format!(
                "column slice {start}..{} out of range for {c} columns",
                start + len
            )));
        }
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&t.row(i)[start..start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![r, len], out)?,
            Op::SliceCols { x, start },
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Parameter("concat of nothing".into()))?;
        let (rows, _) = require_2d("concat_cols", self.value(*first))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = require_2d("concat_cols", self.value(p))?;
            if r != rows {
                return Err(Error::dim(
                    "concat_cols",
                    self.value(*first).shape(),
                    self.value(p).shape(),
                ));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(vec![rows, total], out)?,
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Parameter("concat of nothing".into()))?;
        let (_, cols) = require_2d("concat_rows", self.value(*first))?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let t = self.value(p);
            let (r, c) = require_2d("concat_rows", t)?;
            if c != cols {
                return Err(Error::dim(
                    "concat_rows",
                    self.value(*first).shape(),
                    t.shape(),
                ));
            }
            rows += r;
            out.extend_from_slice(t.data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(vec![rows, cols], out)?,
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Element at flat position `index`, as a `[1]` tensor.
    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var> {
        let t = self.value(x);
        let v = *t.data().get(index).ok_or_else(|| {
            Error::Input(format!("index {index} out of range for {:?}", t.shape()))
        })?;
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(v), Op::Pick { x, index }, rg))
    }

    /// Forward value is `hard`; the backward pass routes the incoming
    /// gradient to `soft` unchanged.
    pub fn straight_through(&mut self, hard: Tensor, soft: Var) -> Result<Var> {
        if hard.shape() != self.value(soft).shape() {
            return Err(Error::dim(
                "straight_through",
                hard.shape(),
                self.value(soft).shape(),
            ));
        }
        let rg = self.rg(soft);
        Ok(self.push(hard, Op::StraightThrough { soft }, rg))
    }

    /// Runs the reverse sweep from a scalar loss.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Contract(format!("{loss:?} is not on this tape")));
        }
        let t = self.value(loss);
        if t.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                t.shape()
            )));
        }
        let seed = Tensor::ones(t.shape());
        self.backward_with(&[(loss, seed)])
    }

    /// Reverse sweep seeded with explicit output gradients. Seeds for the
    /// same node are summed.
    pub fn backward_with(&mut self, seeds: &[(Var, Tensor)]) -> Result<()> {
        let Some(top) = seeds.iter().map(|(v, _)| v.0).max() else {
            return Ok(());
        };
        if top >= self.nodes.len() {
            return Err(Error::Contract("seed is not on this tape".into()));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(top + 1, || None);
        for (v, g) in seeds {
            if g.shape() != self.value(*v).shape() {
                return Err(Error::dim(
                    "backward seed",
                    g.shape(),
                    self.value(*v).shape(),
                ));
            }
            if self.rg(*v) {
                accumulate(&mut grads, *v, g);
            }
        }
        if self.grads.len() < self.nodes.len() {
            self.grads.resize_with(self.nodes.len(), || None);
        }

        for id in (0..=top).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            self.propagate(id, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                match &mut self.grads[id] {
                    Some(existing) => existing.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if self.rg(a) {
                    // dA = G · Bᵀ
                    acc_with(grads, a, ta.shape(), |buf| {
                        gemm_nt_acc(gd, tb.data(), buf, m, n, k)
                    });
                }
                if self.rg(b) {
                    // dB = Aᵀ · G
                    acc_with(grads, b, tb.shape(), |buf| {
                        gemm_tn_acc(ta.data(), gd, buf, m, k, n)
                    });
                }
            }
            &Op::Transpose(a) => {
                let ta = self.value(a);
                let (r, c) = (ta.shape()[0], ta.shape()[1]);
                acc_with(grads, a, ta.shape(), |buf| {
                    for i in 0..r {
                        for j in 0..c {
                            buf[i * c + j] += gd[j * r + i];
                        }
                    }
                });
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if self.rg(v) {
                        accumulate(grads, v, g);
                    }
                }
            }
            &Op::AddBias(x, bias) => {
                if self.rg(x) {
                    accumulate(grads, x, g);
                }
                if self.rg(bias) {
                    let d = self.value(bias).len();
                    acc_with(grads, bias, &[d], |buf| {
                        for (i, v) in gd.iter().enumerate() {
                            buf[i % d] += v;
                        }
                    });
                }
            }
            &Op::Mul(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                if self.rg(a) {
                    acc_with(grads, a, ta.shape(), |buf| {
                        for ((o, gv), bv) in buf.iter_mut().zip(gd).zip(tb.data()) {
                            *o += gv * bv;
                        }
                    });
                }
                if self.rg(b) {
                    acc_with(grads, b, tb.shape(), |buf| {
                        for ((o, gv), av) in buf.iter_mut().zip(gd).zip(ta.data()) {
                            *o += gv * av;
                        }
                    });
                }
            }
            &Op::ScaleRows(x, w) => {
                let (tx, tw) = (self.value(x), self.value(w));
                let d = tx.last_dim();
                if self.rg(x) {
                    let wd = tw.data();
                    acc_with(grads, x, tx.shape(), |buf| {
                        for (i, (o, gv)) in buf.iter_mut().zip(gd).enumerate() {
                            *o += gv * wd[i / d];
                        }
                    });
                }
                if self.rg(w) {
                    let xd = tx.data();
                    acc_with(grads, w, tw.shape(), |buf| {
                        for (i, (gv, xv)) in gd.iter().zip(xd).enumerate() {
                            buf[i / d] += gv * xv;
                        }
                    });
                }
            }
            &Op::Scale(a, s) => {
                acc_with(grads, a, g.shape(), |buf| {
                    for (o, gv) in buf.iter_mut().zip(gd) {
                        *o += gv * s;
                    }
                });
            }
            &Op::Relu(a) => {
                let xa = self.value(a).data();
                acc_with(grads, a, g.shape(), |buf| {
                    for ((o, gv), xv) in buf.iter_mut().zip(gd).zip(xa) {
                        if *xv > 0.0 {
                            *o += gv;
                        }
                    }
                });
            }
            &Op::Softmax { x, axis } => {
                let y = node.value.data();
                let shape = node.value.shape();
                let (outer, len, inner) = axis_split(shape, axis);
                acc_with(grads, x, shape, |buf| {
                    for o in 0..outer {
                        for j in 0..inner {
                            let at = |i: usize| (o * len + i) * inner + j;
                            let dotp: f64 = (0..len).map(|i| gd[at(i)] * y[at(i)]).sum();
                            for i in 0..len {
                                buf[at(i)] += y[at(i)] * (gd[at(i)] - dotp);
                            }
                        }
                    }
                });
            }
            &Op::LogSoftmax { x, axis } => {
                let y = node.value.data();
                let shape = node.value.shape();
                let (outer, len, inner) = axis_split(shape, axis);
                acc_with(grads, x, shape, |buf| {
                    for o in 0..outer {
                        for j in 0..inner {
                            let at = |i: usize| (o * len + i) * inner + j;
                            let total: f64 = (0..len).map(|i| gd[at(i)]).sum();
                            for i in 0..len {
                                buf[at(i)] += gd[at(i)] - y[at(i)].exp() * total;
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let d = self.value(gain).len();
                let gv = self.value(gain).data();
                if self.rg(x) {
                    acc_with(grads, x, g.shape(), |buf| {
                        let mut dxhat = vec![0.0; d];
                        for (r, &is) in inv_std.iter().enumerate() {
                            let off = r * d;
                            for ((dx, &g), &w) in dxhat.iter_mut().zip(&gd[off..off + d]).zip(gv) {
                                *dx = g * w;
                            }
                            let mean_dx = dxhat.iter().sum::<f64>() / d as f64;
                            let mean_dx_xhat = dxhat
                                .iter()
                                .zip(&xhat[off..off + d])
                                .map(|(a, b)| a * b)
                                .sum::<f64>()
                                / d as f64;
                            for j in 0..d {
                                buf[off + j] +=
                                    is * (dxhat[j] - mean_dx - xhat[off + j] * mean_dx_xhat);
                            }
                        }
                    });
                }
                if self.rg(gain) {
                    acc_with(grads, gain, &[d], |buf| {
                        for (i, (gvv, h)) in gd.iter().zip(xhat).enumerate() {
                            buf[i % d] += gvv * h;
                        }
                    });
                }
                if self.rg(bias) {
                    acc_with(grads, bias, &[d], |buf| {
                        for (i, gvv) in gd.iter().enumerate() {
                            buf[i % d] += gvv;
                        }
                    });
                }
            }
            Op::GatherRows { table, idx } => {
                let table = *table;
                let t = self.value(table);
                let c = t.shape()[1];
                acc_with(grads, table, t.shape(), |buf| {
                    for (k, &row) in idx.iter().enumerate() {
                        let src = &gd[k * c..(k + 1) * c];
                        for (o, v) in buf[row * c..(row + 1) * c].iter_mut().zip(src) {
                            *o += v;
                        }
                    }
                });
            }
            &Op::SliceCols { x, start } => {
                let t = self.value(x);
                let (r, c) = (t.shape()[0], t.shape()[1]);
                let len = g.shape()[1];
                acc_with(grads, x, t.shape(), |buf| {
                    for i in 0..r {
                        for j in 0..len {
                            buf[i * c + start + j] += gd[i * len + j];
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = g.shape()[1];
                let rows = g.shape()[0];
                let mut offset = 0;
                for &p in parts {
                    let tp = self.value(p);
                    let c = tp.shape()[1];
                    if self.rg(p) {
                        acc_with(grads, p, tp.shape(), |buf| {
                            for i in 0..rows {
                                for j in 0..c {
                                    buf[i * c + j] += gd[i * total + offset + j];
                                }
                            }
                        });
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let tp = self.value(p);
                    let n = tp.len();
                    if self.rg(p) {
                        acc_with(grads, p, tp.shape(), |buf| {
                            for (o, v) in buf.iter_mut().zip(&gd[offset..offset + n]) {
                                *o += v;
                            }
                        });
                    }
                    offset += n;
                }
            }
            &Op::Sum(a) => {
                let s = gd[0];
                acc_with(grads, a, self.value(a).shape(), |buf| {
                    buf.iter_mut().for_each(|o| *o += s);
                });
            }
            &Op::Pick { x, index } => {
                let s = gd[0];
                acc_with(grads, x, self.value(x).shape(), |buf| buf[index] += s);
            }
            &Op::StraightThrough { soft } => {
                accumulate(grads, soft, g);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: &Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(g),
        slot @ None => *slot = Some(g.clone()),
    }
}

fn acc_with(grads: &mut [Option<Tensor>], v: Var, shape: &[usize], f: impl FnOnce(&mut [f64])) {
    let slot = &mut grads[v.0];
    let buf = slot.get_or_insert_with(|| Tensor::zeros(shape));
    f(buf.data_mut());
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::rng::Rng;

    fn t2(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    fn random(shape: &[usize], rng: &mut Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.uniform() * 2.0 - 1.0).collect(),
        )
        .unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut tape = Tape::new();
        let a = tape.constant(t2(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let eye = tape.constant(t2(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let c = tape.matmul(a, eye).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);

        let r = tape.constant(t2(&[vec![1.0, 2.0]]));
        let col = tape.constant(t2(&[vec![3.0], vec![4.0]]));
        let d = tape.matmul(r, col).unwrap();
        assert_eq!(tape.value(d).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn matmul_grad_is_ones_times_bt() {
        let mut rng = Rng::new(11, 0);
        let a0 = random(&[3, 4], &mut rng);
        let b0 = random(&[4, 2], &mut rng);
        let mut tape = Tape::new();
        let a = tape.leaf(a0.clone());
        let b = tape.constant(b0.clone());
        let c = tape.matmul(a, b).unwrap();
        let s = tape.sum(c);
        tape.backward(s).unwrap();
        let g = tape.grad(a).unwrap();
        for i in 0..3 {
            for k in 0..4 {
                let expected: f64 = b0.row(k).iter().sum();
                assert!((g.data()[i * 4 + k] - expected).abs() < 1e-15);
            }
        }
        let err = grad_check(
            |tape, x| {
                let b = tape.constant(b0.clone());
                let c = tape.matmul(x, b).unwrap();
                tape.sum(c)
            },
            &a0,
            1e-6,
        );
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn relu_forward_and_mask() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);

        let neg = tape.constant(Tensor::vector(vec![-3.0, -0.1]));
        let z = tape.relu(neg);
        assert_eq!(tape.value(z).data(), &[0.0, 0.0]);

        let x0 = Tensor::vector(vec![-0.5, 0.5]);
        let err = grad_check(
            |tape, x| {
                let y = tape.relu(x);
                let w = tape.constant(Tensor::vector(vec![2.0, 3.0]));
                let p = tape.mul(y, w).unwrap();
                tape.sum(p)
            },
            &x0,
            1e-6,
        );
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn softmax_values() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![0.0, 0.0]));
        let sa = tape.softmax(a, 0);
        assert_eq!(tape.value(sa).data(), &[0.5, 0.5]);

        let b = tape.constant(Tensor::vector(vec![1000.0, 0.0]));
        let sb = tape.softmax(b, 0);
        let v = tape.value(sb).data();
        assert_eq!(v[0], 1.0);
        assert!(v[1] >= 0.0 && v[1] < 1e-300 || v[1] == 0.0);
        assert!(v.iter().all(|x| x.is_finite()));

        // e^1, e^2, e^3 = 2.718281828, 7.389056099, 20.08553692; sum 30.19287485
        let c = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let sc = tape.softmax(c, 0);
        let expected = [0.090_030_57, 0.244_728_47, 0.665_240_96];
        for (got, want) in tape.value(sc).data().iter().zip(expected) {
            assert!((got - want).abs() < 1e-8, "{got} vs {want}");
        }
    }

    #[test]
    fn softmax_along_axis_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(t2(&[vec![0.0, 1.0], vec![0.0, 1.0]]));
        let y = tape.softmax(x, 0);
        assert_eq!(tape.value(y).data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn softmax_pick_first_gradcheck() {
        let x0 = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let err = grad_check(
            |tape, x| {
                let y = tape.softmax(x, 0);
                tape.pick(y, 0).unwrap()
            },
            &x0,
            1e-6,
        );
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::ones(&[4]));
        let b = tape.constant(Tensor::zeros(&[4]));
        let x = tape.constant(Tensor::vector(vec![2.5; 4]));
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0; 4]);

        let g2 = tape.constant(Tensor::ones(&[2]));
        let b2 = tape.constant(Tensor::zeros(&[2]));
        let x2 = tape.constant(Tensor::vector(vec![1.0, -1.0]));
        let y2 = tape.layer_norm(x2, g2, b2, 0.0).unwrap();
        assert_eq!(tape.value(y2).data(), &[1.0, -1.0]);
    }

    #[test]
    fn layer_norm_gradcheck_random_vector() {
        let mut rng = Rng::new(5, 0);
        let x0 = random(&[8], &mut rng);
        let w = random(&[8], &mut rng);
        let gain = random(&[8], &mut rng);
        let bias = random(&[8], &mut rng);
        let err = grad_check(
            |tape, x| {
                let g = tape.constant(gain.clone());
                let b = tape.constant(bias.clone());
                let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
                let w = tape.constant(w.clone());
                let p = tape.mul(y, w).unwrap();
                tape.sum(p)
            },
            &x0,
            1e-6,
        );
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn backward_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.3, -2.0, 7.0]));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 3]);

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().item(), 6.0);
        // accumulates until zeroed
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().item(), 12.0);
        tape.zero_grad();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_never_accumulate() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let x = tape.leaf(Tensor::vector(vec![3.0, 4.0]));
        let p = tape.mul(c, x).unwrap();
        let s = tape.sum(p);
        tape.backward(s).unwrap();
        assert!(tape.grad(c).is_none());
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn straight_through_passes_gradient_to_soft() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.1, 0.4]));
        let soft = tape.softmax(x, 0);
        let hard = tape
            .straight_through(Tensor::vector(vec![0.0, 1.0]), soft)
            .unwrap();
        assert_eq!(tape.value(hard).data(), &[0.0, 1.0]);
        let w = tape.constant(Tensor::vector(vec![1.0, -1.0]));
        let p = tape.mul(hard, w).unwrap();
        let s = tape.sum(p);
        tape.backward(s).unwrap();
        let g = tape.grad(x).unwrap().data().to_vec();
        // d/dx of (soft0 - soft1)
        let s0 = tape.value(soft).data()[0];
        let s1 = tape.value(soft).data()[1];
        assert!((g[0] - 2.0 * s0 * s1).abs() < 1e-15);
        assert!((g[1] + 2.0 * s0 * s1).abs() < 1e-15);
    }

    #[test]
    fn structural_ops_gradcheck() {
        let mut rng = Rng::new(9, 1);
        let x0 = random(&[3, 4], &mut rng);
        let w = random(&[2, 6], &mut rng);
        let err = grad_check(
            |tape, x| {
                let a = tape.slice_cols(x, 1, 2).unwrap();
                let b = tape.gather_rows(x, &[2, 0]).unwrap();
                let bt = tape.transpose(b).unwrap(); // 4×2
                let c = tape.concat_cols(&[a, a]).unwrap(); // 3×4
                let cc = tape.matmul(c, bt).unwrap(); // 3×2
                let r = tape.concat_rows(&[cc, cc]).unwrap(); // 6×2
                let rt = tape.transpose(r).unwrap(); // 2×6
                let wv = tape.constant(w.clone());
                let m = tape.mul(rt, wv).unwrap();
                let ls = tape.log_softmax(m, 1);
                let col = tape.slice_cols(ls, 0, 1).unwrap();
                let sr = tape.scale_rows(m, col).unwrap();
                let bias = tape.slice_cols(x, 0, 1).unwrap();
                let bias = tape.transpose(bias).unwrap();
                let bias = tape.gather_rows(bias, &[0]).unwrap();
                let bias = tape.concat_cols(&[bias, bias]).unwrap();
                let bias = tape.slice_cols(bias, 0, 6).unwrap();
                let sum_b = tape.sum(bias);
                let s = tape.sum(sr);
                let t = tape.add(s, sum_b).unwrap();
                tape.scale(t, 0.5)
            },
            &x0,
            1e-6,
        );
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn ops_pass_gradcheck_over_random_trials() {
        let mut rng = Rng::new(2024, 0);
        for trial in 0..100 {
            let x0 = random(&[2, 5], &mut rng);
            // keep relu inputs away from the kink
            let off: Vec<f64> = x0
                .data()
                .iter()
                .map(|v| if v.abs() < 0.05 { v + 0.1 } else { *v })
                .collect();
            let x0 = Tensor::new(vec![2, 5], off).unwrap();
            let w = random(&[5, 3], &mut rng);
            let bias = random(&[3], &mut rng);
            let gain = random(&[3], &mut rng);
            let err = grad_check(
                |tape, x| {
                    let wv = tape.constant(w.clone());
                    let h = tape.matmul(x, wv).unwrap();
                    let bv = tape.constant(bias.clone());
                    let h = tape.add_bias(h, bv).unwrap();
                    let gv = tape.constant(gain.clone());
                    let bv2 = tape.constant(bias.clone());
                    let h = tape.layer_norm(h, gv, bv2, 1e-12).unwrap();
                    let r = tape.relu(x);
                    let r = tape.sum(r);
                    let sm = tape.softmax(h, 1);
                    let ls = tape.log_softmax(h, 1);
                    let e = tape.mul(sm, ls).unwrap();
                    let e = tape.sum(e);
                    tape.add(e, r).unwrap()
                },
                &x0,
                1e-6,
            );
            assert!(err < 1e-4, "trial {trial}: {err}");
        }
    }
}
