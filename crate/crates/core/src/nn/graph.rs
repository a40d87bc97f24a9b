//! Tape-based reverse-mode autodiff.
//!
//! A [`Graph`] records every operation as a node appended after its inputs,
//! so reverse node order is a valid topological order for the backward pass.
//! Parameters are pulled from a [`ParamStore`] by name and their gradients are
//! read back with [`Graph::param_grads`].

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::Rng;

use super::params::ParamStore;
use super::tensor::{matmul_raw, transpose_raw, Tensor};
use super::NnError;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Row-major `rows×cols` attention mask; `true` means the key may be
/// attended.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    allow: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, allow: Vec<bool>) -> Mask {
        assert_eq!(rows * cols, allow.len(), "mask size");
        Mask { rows, cols, allow }
    }

    /// Lower-triangular: query `i` sees keys `0..=i`.
    pub fn causal(n: usize) -> Mask {
        let allow = (0..n * n).map(|idx| idx % n <= idx / n).collect();
        Mask::new(n, n, allow)
    }

    /// Every query sees exactly the keys flagged valid.
    pub fn keys(rows: usize, key_valid: &[bool]) -> Mask {
        let allow = (0..rows).flat_map(|_| key_valid.iter().copied()).collect();
        Mask::new(rows, key_valid.len(), allow)
    }

    pub fn and(&self, other: &Mask) -> Mask {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "mask shapes");
        let allow = self.allow.iter().zip(&other.allow).map(|(a, b)| *a && *b).collect();
        Mask::new(self.rows, self.cols, allow)
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.allow[i * self.cols + j]
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Relu(Var),
    Softmax { x: Var, axis: usize },
    MaskedSoftmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Embedding { table: Var, ids: Vec<usize> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    MeanRows { x: Var, rows: Vec<usize> },
    Sum(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, ignore: Option<usize>, count: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> NnError {
    NnError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

impl Graph {
    pub fn new() -> Graph {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        debug_assert!(value.is_finite(), "non-finite output from {op:?}");
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Differentiable leaf for the named store entry, created once per graph.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var, NnError> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| NnError::UnknownParam(name.to_owned()))?
            .clone();
        let v = self.leaf(t, true);
        self.params.insert(name.to_owned(), v);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient, present after a backward pass reached `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Gradients of every parameter registered through [`Graph::param`]
    /// that the backward pass reached.
    pub fn param_grads(&self) -> BTreeMap<String, Vec<f64>> {
        self.params
            .iter()
            .filter_map(|(name, v)| self.grad(*v).map(|g| (name.clone(), g.to_vec())))
            .collect()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.require_matrix("matmul")?;
        let (k2, n) = tb.require_matrix("matmul")?;
        if k != k2 {
            return Err(mismatch("matmul", ta, tb));
        }
        let out = Tensor::new(vec![m, n], matmul_raw(ta.data(), tb.data(), m, k, n))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, NnError> {
        let ta = self.value(a);
        let (m, n) = ta.require_matrix("transpose")?;
        let out = Tensor::new(vec![n, m], transpose_raw(ta.data(), m, n))?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("add", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Adds a `[n]` vector to every row of an `[…×n]` tensor.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.shape() != [ta.cols()] {
            return Err(mismatch("add_row", ta, tb));
        }
        let n = ta.cols();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + tb.data()[i % n])
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::AddRow(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("mul", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let ta = self.value(a);
        let out = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| x * s).collect())
            .expect("same shape");
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let out = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|&x| gelu(x)).collect())
            .expect("same shape");
        let rg = self.rg(a);
        self.push(out, Op::Gelu(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let out = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|&x| x.max(0.0)).collect())
            .expect("same shape");
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    /// Numerically stable softmax along `axis` (max subtracted first).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, NnError> {
        let tx = self.value(x);
        let shape = tx.shape().to_vec();
        if axis >= shape.len() {
            return Err(NnError::InvalidAxis { axis, ndim: shape.len() });
        }
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let src = tx.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for r in 0..inner {
                let idx = |i: usize| (o * len + i) * inner + r;
                let max = (0..len).map(|i| src[idx(i)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for i in 0..len {
                    let e = (src[idx(i)] - max).exp();
                    out[idx(i)] = e;
                    sum += e;
                }
                for i in 0..len {
                    out[idx(i)] /= sum;
                }
            }
        }
        let out = Tensor::new(shape, out)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Softmax { x, axis }, rg))
    }

    /// Row softmax of a matrix restricted to allowed entries; blocked
    /// entries are exactly zero, as if biased by −∞.
    pub fn masked_softmax(&mut self, x: Var, mask: Rc<Mask>) -> Result<Var, NnError> {
        let tx = self.value(x);
        let (m, n) = tx.require_matrix("masked_softmax")?;
        if mask.shape() != (m, n) {
            return Err(NnError::ShapeMismatch {
                op: "masked_softmax",
                left: vec![m, n],
                right: vec![mask.rows, mask.cols],
            });
        }
        let src = tx.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let max = (0..n)
                .filter(|&j| mask.allows(i, j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(NnError::FullyMaskedRow(i));
            }
            let mut sum = 0.0;
            for j in 0..n {
                if mask.allows(i, j) {
                    let e = (row[j] - max).exp();
                    out[i * n + j] = e;
                    sum += e;
                }
            }
            for v in &mut out[i * n..(i + 1) * n] {
                *v /= sum;
            }
        }
        let out = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::MaskedSoftmax(x), rg))
    }

    /// Normalizes each row over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, NnError> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let d = tx.cols();
        if tg.shape() != [d] {
            return Err(mismatch("layer_norm", tx, tg));
        }
        if tb.shape() != [d] {
            return Err(mismatch("layer_norm", tx, tb));
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0; tx.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; tx.len()];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            out,
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

    /// Gathers rows of a `[vocab×d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, NnError> {
        let tt = self.value(table);
        let (v, d) = tt.require_matrix("embedding")?;
        if ids.is_empty() {
            return Err(NnError::InvalidShape(vec![0, d]));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(NnError::IndexOutOfRange { index: id, size: v });
            }
            out.extend_from_slice(tt.row(id));
        }
        let out = Tensor::new(vec![ids.len(), d], out)?;
        let rg = self.rg(table);
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var, NnError> {
        let tx = self.value(x);
        let (m, n) = tx.require_matrix("slice_cols")?;
        if start >= end || end > n {
            return Err(NnError::IndexOutOfRange { index: end, size: n });
        }
        let w = end - start;
        let mut out = Vec::with_capacity(m * w);
        for i in 0..m {
            out.extend_from_slice(&tx.row(i)[start..end]);
        }
        let out = Tensor::new(vec![m, w], out)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        let first = self.value(*parts.first().ok_or(NnError::InvalidShape(vec![]))?);
        let (m, _) = first.require_matrix("concat_cols")?;
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            let (pm, pn) = t.require_matrix("concat_cols")?;
            if pm != m {
                return Err(mismatch("concat_cols", first, t));
            }
            total += pn;
        }
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::new(vec![m, total], out)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        let first = self.value(*parts.first().ok_or(NnError::InvalidShape(vec![]))?);
        let (_, n) = first.require_matrix("concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let t = self.value(p);
            let (pm, pn) = t.require_matrix("concat_rows")?;
            if pn != n {
                return Err(mismatch("concat_rows", first, t));
            }
            rows += pm;
            out.extend_from_slice(t.data());
        }
        let out = Tensor::new(vec![rows, n], out)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Mean of the selected rows of a matrix, as a `[1×n]` matrix.
    pub fn mean_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var, NnError> {
        let tx = self.value(x);
        let (m, n) = tx.require_matrix("mean_rows")?;
        if rows.is_empty() {
            return Err(NnError::InvalidShape(vec![0, n]));
        }
        let mut out = vec![0.0; n];
        for &r in rows {
            if r >= m {
                return Err(NnError::IndexOutOfRange { index: r, size: m });
            }
            for (o, v) in out.iter_mut().zip(tx.row(r)) {
                *o += v;
            }
        }
        let k = rows.len() as f64;
        out.iter_mut().for_each(|o| *o /= k);
        let out = Tensor::new(vec![1, n], out)?;
        let rg = self.rg(x);
        Ok(self.push(
            out,
            Op::MeanRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Mean negative log-likelihood of `targets` under row-softmax of
    /// `logits`, skipping rows whose target equals `ignore`.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        ignore: Option<usize>,
    ) -> Result<Var, NnError> {
        let tl = self.value(logits);
        let (m, c) = tl.require_matrix("cross_entropy")?;
        if targets.len() != m {
            return Err(NnError::ShapeMismatch {
                op: "cross_entropy",
                left: vec![m, c],
                right: vec![targets.len()],
            });
        }
        let mut total = 0.0;
        let mut count = 0;
        for (i, &t) in targets.iter().enumerate() {
            if Some(t) == ignore {
                continue;
            }
            if t >= c {
                return Err(NnError::TargetOutOfRange { target: t, classes: c });
            }
            let row = tl.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
            count += 1;
        }
        if count == 0 {
            return Err(NnError::AllIgnored);
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(total / count as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore,
                count,
            },
            rg,
        ))
    }

    /// Inverted dropout: zeroes entries with probability `rate` and rescales
    /// the survivors. Identity when `rate` is 0.
    pub fn dropout<R: Rng>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var, NnError> {
        if rate <= 0.0 {
            return Ok(x);
        }
        let shape = self.value(x).shape().to_vec();
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let m = self.input(Tensor::new(shape, mask)?);
        self.mul(x, m)
    }

    /// Backpropagates from a scalar, adding into any gradients already
    /// stored on the graph.
    pub fn backward(&mut self, loss: Var) -> Result<(), NnError> {
        if self.value(loss).len() != 1 {
            return Err(NnError::NotScalar(self.value(loss).shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            let node = &mut self.nodes[idx];
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let want = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, delta: Vec<f64>| match &mut grads[v.0] {
            Some(existing) => existing.iter_mut().zip(delta).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(delta),
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if want(*a) {
                    let bt = transpose_raw(tb.data(), k, n);
                    acc(*a, matmul_raw(g, &bt, m, n, k));
                }
                if want(*b) {
                    let at = transpose_raw(ta.data(), m, k);
                    acc(*b, matmul_raw(&at, g, k, m, n));
                }
            }
            Op::Transpose(a) => {
                let (n, m) = (node.value.shape()[0], node.value.shape()[1]);
                acc(*a, transpose_raw(g, n, m));
            }
            Op::Add(a, b) => {
                if want(*a) {
                    acc(*a, g.to_vec());
                }
                if want(*b) {
                    acc(*b, g.to_vec());
                }
            }
            Op::AddRow(a, b) => {
                if want(*a) {
                    acc(*a, g.to_vec());
                }
                if want(*b) {
                    let n = node.value.cols();
                    let mut gb = vec![0.0; n];
                    for (i, v) in g.iter().enumerate() {
                        gb[i % n] += v;
                    }
                    acc(*b, gb);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if want(*a) {
                    acc(*a, g.iter().zip(tb.data()).map(|(g, y)| g * y).collect());
                }
                if want(*b) {
                    acc(*b, g.iter().zip(ta.data()).map(|(g, x)| g * x).collect());
                }
            }
            Op::Scale(a, s) => acc(*a, g.iter().map(|v| v * s).collect()),
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                acc(*a, g.iter().zip(x).map(|(g, &x)| g * gelu_grad(x)).collect());
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                acc(*a, g.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect());
            }
            Op::Softmax { x, axis } => {
                let shape = node.value.shape();
                let y = node.value.data();
                let len = shape[*axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let outer: usize = shape[..*axis].iter().product();
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for r in 0..inner {
                        let idx = |i: usize| (o * len + i) * inner + r;
                        let dot: f64 = (0..len).map(|i| g[idx(i)] * y[idx(i)]).sum();
                        for i in 0..len {
                            dx[idx(i)] = y[idx(i)] * (g[idx(i)] - dot);
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::MaskedSoftmax(x) => {
                let (m, n) = (node.value.shape()[0], node.value.shape()[1]);
                let y = node.value.data();
                let mut dx = vec![0.0; y.len()];
                for i in 0..m {
                    let r = i * n..(i + 1) * n;
                    let dot: f64 = g[r.clone()].iter().zip(&y[r.clone()]).map(|(a, b)| a * b).sum();
                    for j in r {
                        dx[j] = y[j] * (g[j] - dot);
                    }
                }
                acc(*x, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = node.value.cols();
                let rows = inv_std.len();
                let gn = self.value(*gain).data();
                if want(*gain) {
                    let mut dg = vec![0.0; d];
                    for (i, v) in g.iter().enumerate() {
                        dg[i % d] += v * xhat[i];
                    }
                    acc(*gain, dg);
                }
                if want(*bias) {
                    let mut db = vec![0.0; d];
                    for (i, v) in g.iter().enumerate() {
                        db[i % d] += v;
                    }
                    acc(*bias, db);
                }
                if want(*x) {
                    let mut dx = vec![0.0; g.len()];
                    let df = d as f64;
                    for r in 0..rows {
                        let off = r * d;
                        let dxhat: Vec<f64> = (0..d).map(|j| g[off + j] * gn[j]).collect();
                        let s1: f64 = dxhat.iter().sum();
                        let s2: f64 = dxhat.iter().zip(&xhat[off..off + d]).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            dx[off + j] =
                                inv_std[r] / df * (df * dxhat[j] - s1 - xhat[off + j] * s2);
                        }
                    }
                    acc(*x, dx);
                }
            }
            Op::Embedding { table, ids } => {
                let t = self.value(*table);
                let d = t.cols();
                let mut dt = vec![0.0; t.len()];
                for (row, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += g[row * d + j];
                    }
                }
                acc(*table, dt);
            }
            Op::SliceCols { x, start } => {
                let tx = self.value(*x);
                let (m, n) = (tx.shape()[0], tx.shape()[1]);
                let w = node.value.cols();
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    dx[i * n + start..i * n + start + w].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                acc(*x, dx);
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let m = node.value.rows();
                let mut col = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if want(p) {
                        let mut dp = Vec::with_capacity(m * w);
                        for i in 0..m {
                            dp.extend_from_slice(&g[i * total + col..i * total + col + w]);
                        }
                        acc(p, dp);
                    }
                    col += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if want(p) {
                        acc(p, g[off..off + len].to_vec());
                    }
                    off += len;
                }
            }
            Op::MeanRows { x, rows } => {
                let tx = self.value(*x);
                let n = tx.cols();
                let k = rows.len() as f64;
                let mut dx = vec![0.0; tx.len()];
                for &r in rows {
                    for j in 0..n {
                        dx[r * n + j] += g[j] / k;
                    }
                }
                acc(*x, dx);
            }
            Op::Sum(x) => acc(*x, vec![g[0]; self.value(*x).len()]),
            Op::CrossEntropy {
                logits,
                targets,
                ignore,
                count,
            } => {
                let tl = self.value(*logits);
                let c = tl.cols();
                let scale = g[0] / *count as f64;
                let mut dl = vec![0.0; tl.len()];
                for (i, &t) in targets.iter().enumerate() {
                    if Some(t) == *ignore {
                        continue;
                    }
                    let row = tl.row(i);
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
                    for j in 0..c {
                        let p = (row[j] - max).exp() / z;
                        dl[i * c + j] = scale * (p - if j == t { 1.0 } else { 0.0 });
                    }
                }
                acc(*logits, dl);
            }
        }
    }
}
