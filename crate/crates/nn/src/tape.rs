//! Reverse-mode automatic differentiation on a Wengert list.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles. Calling
//! [`Tape::backward`] on a scalar node walks the list in reverse and returns
//! the gradient of that scalar with respect to every node that requires one.
//! Tapes are cheap and meant to be rebuilt for every forward pass.

use crate::mat::Mat;
use crate::params::{ParamId, ParamStore};
use std::collections::HashMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
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
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Gelu(Var),
    Exp(Var),
    Log(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    MaxRows(Var, Vec<usize>),
    SumAll(Var),
    MeanRows(Var),
    SumSq(Var),
    NormalizeRows(Var, Vec<f64>),
    Nll(Var, Vec<usize>),
    Unfold(Var, usize),
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bound: HashMap<(u64, ParamId), Var>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Mat>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

const LN_EPS: f64 = 1e-5;

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let d_inner = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
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

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    /// A leaf that gradients flow into.
    pub fn var(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Binds a stored parameter. Repeated calls within one tape reuse the same leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&(store.uid(), id)) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, true);
        self.bound.insert((store.uid(), id), v);
        v
    }

    /// Binds a stored parameter without tracking its gradient.
    pub fn frozen_param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&(store.uid(), id)) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, false);
        self.bound.insert((store.uid(), id), v);
        v
    }

    /// Binds every parameter of `store` as a constant, so later [`Tape::param`]
    /// calls on it return leaves that receive no gradient.
    pub fn freeze(&mut self, store: &ParamStore) {
        for id in store.ids() {
            self.frozen_param(store, id);
        }
    }

    /// `(store uid, param id, leaf)` for every bound parameter.
    pub fn bound_params(&self) -> impl Iterator<Item = (u64, ParamId, Var)> + '_ {
        self.bound.iter().map(|(&(uid, p), &v)| (uid, p, v))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    /// `a + row` with `row` (1 x c) broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (am, rm) = (self.value(a), self.value(row));
        assert_eq!(rm.rows(), 1, "add_row expects a row vector");
        assert_eq!(am.cols(), rm.cols(), "add_row width mismatch");
        let mut value = am.clone();
        for r in 0..value.rows() {
            for (x, &b) in value.row_mut(r).iter_mut().zip(rm.row(0)) {
                *x += b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(value, Op::AddRow(a, row), ng)
    }

    /// `a * row` elementwise with `row` (1 x c) broadcast over the rows of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (am, rm) = (self.value(a), self.value(row));
        assert_eq!(rm.rows(), 1, "mul_row expects a row vector");
        assert_eq!(am.cols(), rm.cols(), "mul_row width mismatch");
        let mut value = am.clone();
        for r in 0..value.rows() {
            for (x, &b) in value.row_mut(r).iter_mut().zip(rm.row(0)) {
                *x *= b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(value, Op::MulRow(a, row), ng)
    }

    /// `a * s` where `s` is a 1 x 1 node.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        let sv = self.value(s).item();
        let value = self.value(a).map(|x| x * sv);
        let ng = self.ng(a) || self.ng(s);
        self.push(value, Op::MulScalar(a, s), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, s), ng)
    }

    /// Adds a constant matrix (masks, offsets); gradient passes straight through.
    pub fn add_const(&mut self, a: Var, c: &Mat) -> Var {
        let value = self.value(a).zip_map(c, |x, y| x + y);
        let ng = self.ng(a);
        self.push(value, Op::AddConst(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let ng = self.ng(a);
        self.push(value, Op::Tanh(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        let ng = self.ng(a);
        self.push(value, Op::Sigmoid(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(value, Op::Relu(a), ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        let ng = self.ng(a);
        self.push(value, Op::Gelu(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        let ng = self.ng(a);
        self.push(value, Op::Exp(a), ng)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        let ng = self.ng(a);
        self.push(value, Op::Log(a), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let am = self.value(a);
        let mut value = Mat::zeros(am.rows(), am.cols());
        for r in 0..am.rows() {
            value.row_mut(r).copy_from_slice(&crate::mat::softmax(am.row(r)));
        }
        let ng = self.ng(a);
        self.push(value, Op::SoftmaxRows(a), ng)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let am = self.value(a);
        let mut value = Mat::zeros(am.rows(), am.cols());
        for r in 0..am.rows() {
            value.row_mut(r).copy_from_slice(&crate::mat::log_softmax(am.row(r)));
        }
        let ng = self.ng(a);
        self.push(value, Op::LogSoftmaxRows(a), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(value, Op::Transpose(a), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Mat::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let pm = self.value(p);
            assert_eq!(pm.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                value.row_mut(r)[off..off + pm.cols()].copy_from_slice(pm.row(r));
            }
            off += pm.cols();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pm = self.value(p);
            assert_eq!(pm.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(pm.data());
            rows += pm.rows();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Mat::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let am = self.value(a);
        assert!(start + len <= am.rows(), "slice_rows out of range");
        let value = Mat::from_vec(len, am.cols(), am.data()[start * am.cols()..(start + len) * am.cols()].to_vec());
        let ng = self.ng(a);
        self.push(value, Op::SliceRows(a, start), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let am = self.value(a);
        assert!(start + len <= am.cols(), "slice_cols out of range");
        let mut value = Mat::zeros(am.rows(), len);
        for r in 0..am.rows() {
            value.row_mut(r).copy_from_slice(&am.row(r)[start..start + len]);
        }
        let ng = self.ng(a);
        self.push(value, Op::SliceCols(a, start), ng)
    }

    /// Row lookup, e.g. an embedding table indexed by token ids.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let tm = self.value(table);
        let mut value = Mat::zeros(ids.len(), tm.cols());
        for (r, &id) in ids.iter().enumerate() {
            value.row_mut(r).copy_from_slice(tm.row(id));
        }
        let ng = self.ng(table);
        self.push(value, Op::GatherRows(table, ids.to_vec()), ng)
    }

    /// Column-wise maximum over rows (max-over-time pooling). Ties pick the first row.
    pub fn max_rows(&mut self, a: Var) -> Var {
        let am = self.value(a);
        assert!(am.rows() > 0, "max_rows of an empty matrix");
        let mut arg = vec![0usize; am.cols()];
        let mut value = Mat::zeros(1, am.cols());
        for c in 0..am.cols() {
            let mut best = 0;
            for r in 1..am.rows() {
                if am.get(r, c) > am.get(best, c) {
                    best = r;
                }
            }
            arg[c] = best;
            value.set(0, c, am.get(best, c));
        }
        let ng = self.ng(a);
        self.push(value, Op::MaxRows(a, arg), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Mat::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(value, Op::SumAll(a), ng)
    }

    /// Mean over rows, giving a 1 x c row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let am = self.value(a);
        let mut value = Mat::zeros(1, am.cols());
        for r in 0..am.rows() {
            for (v, &x) in value.row_mut(0).iter_mut().zip(am.row(r)) {
                *v += x;
            }
        }
        let n = am.rows() as f64;
        value.scale_assign(1.0 / n);
        let ng = self.ng(a);
        self.push(value, Op::MeanRows(a), ng)
    }

    pub fn sum_sq(&mut self, a: Var) -> Var {
        let value = Mat::scalar(self.value(a).sum_sq());
        let ng = self.ng(a);
        self.push(value, Op::SumSq(a), ng)
    }

    /// Per-row standardization `(x - mean) / sqrt(var + eps)`; the affine part of
    /// layer norm is applied by the caller.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let am = self.value(a);
        let mut value = Mat::zeros(am.rows(), am.cols());
        let mut inv_std = Vec::with_capacity(am.rows());
        let c = am.cols() as f64;
        for r in 0..am.rows() {
            let row = am.row(r);
            let mean = row.iter().sum::<f64>() / c;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for (o, &x) in value.row_mut(r).iter_mut().zip(row) {
                *o = (x - mean) * inv;
            }
            inv_std.push(inv);
        }
        let ng = self.ng(a);
        self.push(value, Op::NormalizeRows(a, inv_std), ng)
    }

    /// `-sum_r a[r, targets[r]]`; with log-probabilities in `a` this is the summed NLL.
    pub fn nll(&mut self, log_probs: Var, targets: &[usize]) -> Var {
        let am = self.value(log_probs);
        assert_eq!(am.rows(), targets.len(), "nll target count mismatch");
        let total: f64 = targets.iter().enumerate().map(|(r, &t)| -am.get(r, t)).sum();
        let ng = self.ng(log_probs);
        self.push(Mat::scalar(total), Op::Nll(log_probs, targets.to_vec()), ng)
    }

    /// Sliding windows of `width` consecutive rows, each flattened into one row.
    /// Inputs shorter than `width` are zero-padded at the end, so there is always
    /// at least one window.
    pub fn unfold(&mut self, a: Var, width: usize) -> Var {
        assert!(width >= 1, "unfold width must be positive");
        let am = self.value(a);
        let (n, d) = am.shape();
        let windows = n.max(width) - width + 1;
        let mut value = Mat::zeros(windows, width * d);
        for i in 0..windows {
            for k in 0..width {
                if i + k < n {
                    value.row_mut(i)[k * d..(k + 1) * d].copy_from_slice(am.row(i + k));
                }
            }
        }
        let ng = self.ng(a);
        self.push(value, Op::Unfold(a, width), ng)
    }

    /// Gradients of the scalar `loss` with respect to all nodes needing one.
    pub fn backward(&self, loss: Var) -> Grads {
        let lm = self.value(loss);
        assert_eq!(lm.len(), 1, "backward expects a scalar loss");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Grads { grads }
    }

    fn propagate(&self, idx: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let mut acc = |v: Var, delta: Mat| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (am, bm) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    acc(*a, g.matmul_t(bm));
                }
                if self.ng(*b) {
                    acc(*b, am.t_matmul(g));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (am, bm) = (self.value(*a), self.value(*b));
                acc(*a, g.zip_map(bm, |x, y| x * y));
                acc(*b, g.zip_map(am, |x, y| x * y));
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                let mut gr = Mat::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (s, &x) in gr.row_mut(0).iter_mut().zip(g.row(r)) {
                        *s += x;
                    }
                }
                acc(*row, gr);
            }
            Op::MulRow(a, row) => {
                let (am, rm) = (self.value(*a), self.value(*row));
                let mut ga = g.clone();
                let mut gr = Mat::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for c in 0..g.cols() {
                        ga.set(r, c, g.get(r, c) * rm.get(0, c));
                        gr.data_mut()[c] += g.get(r, c) * am.get(r, c);
                    }
                }
                acc(*a, ga);
                acc(*row, gr);
            }
            Op::MulScalar(a, s) => {
                let (am, sv) = (self.value(*a), self.value(*s).item());
                acc(*a, g.map(|x| x * sv));
                let gs: f64 = g.data().iter().zip(am.data()).map(|(x, y)| x * y).sum();
                acc(*s, Mat::scalar(gs));
            }
            Op::Scale(a, s) => acc(*a, g.map(|x| x * s)),
            Op::AddConst(a) => acc(*a, g.clone()),
            Op::Tanh(a) => acc(*a, g.zip_map(out, |x, y| x * (1.0 - y * y))),
            Op::Sigmoid(a) => acc(*a, g.zip_map(out, |x, y| x * y * (1.0 - y))),
            Op::Relu(a) => acc(*a, g.zip_map(self.value(*a), |x, y| if y > 0.0 { x } else { 0.0 })),
            Op::Gelu(a) => acc(*a, g.zip_map(self.value(*a), |x, y| x * gelu_grad(y))),
            Op::Exp(a) => acc(*a, g.zip_map(out, |x, y| x * y)),
            Op::Log(a) => acc(*a, g.zip_map(self.value(*a), |x, y| x / y)),
            Op::SoftmaxRows(a) => {
                let mut ga = Mat::zeros(g.rows(), g.cols());
                for r in 0..g.rows() {
                    let (gr, yr) = (g.row(r), out.row(r));
                    let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                    for (o, (&gx, &y)) in ga.row_mut(r).iter_mut().zip(gr.iter().zip(yr)) {
                        *o = y * (gx - dot);
                    }
                }
                acc(*a, ga);
            }
            Op::LogSoftmaxRows(a) => {
                let mut ga = Mat::zeros(g.rows(), g.cols());
                for r in 0..g.rows() {
                    let (gr, yr) = (g.row(r), out.row(r));
                    let total: f64 = gr.iter().sum();
                    for (o, (&gx, &y)) in ga.row_mut(r).iter_mut().zip(gr.iter().zip(yr)) {
                        *o = gx - y.exp() * total;
                    }
                }
                acc(*a, ga);
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let mut gp = Mat::zeros(g.rows(), w);
                    for r in 0..g.rows() {
                        gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                    }
                    acc(p, gp);
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let h = self.value(p).rows();
                    let gp = Mat::from_vec(h, g.cols(), g.data()[off * g.cols()..(off + h) * g.cols()].to_vec());
                    acc(p, gp);
                    off += h;
                }
            }
            Op::SliceRows(a, start) => {
                let am = self.value(*a);
                let mut ga = Mat::zeros(am.rows(), am.cols());
                for r in 0..g.rows() {
                    ga.row_mut(start + r).copy_from_slice(g.row(r));
                }
                acc(*a, ga);
            }
            Op::SliceCols(a, start) => {
                let am = self.value(*a);
                let mut ga = Mat::zeros(am.rows(), am.cols());
                for r in 0..g.rows() {
                    ga.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                acc(*a, ga);
            }
            Op::GatherRows(table, ids) => {
                let tm = self.value(*table);
                let mut gt = Mat::zeros(tm.rows(), tm.cols());
                for (r, &id) in ids.iter().enumerate() {
                    for (o, &x) in gt.row_mut(id).iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
                acc(*table, gt);
            }
            Op::MaxRows(a, arg) => {
                let am = self.value(*a);
                let mut ga = Mat::zeros(am.rows(), am.cols());
                for (c, &r) in arg.iter().enumerate() {
                    ga.set(r, c, g.get(0, c));
                }
                acc(*a, ga);
            }
            Op::SumAll(a) => {
                let am = self.value(*a);
                acc(*a, Mat::filled(am.rows(), am.cols(), g.item()));
            }
            Op::MeanRows(a) => {
                let am = self.value(*a);
                let n = am.rows() as f64;
                let mut ga = Mat::zeros(am.rows(), am.cols());
                for r in 0..am.rows() {
                    for (o, &x) in ga.row_mut(r).iter_mut().zip(g.row(0)) {
                        *o = x / n;
                    }
                }
                acc(*a, ga);
            }
            Op::SumSq(a) => {
                let gv = g.item();
                acc(*a, self.value(*a).map(|x| 2.0 * x * gv));
            }
            Op::NormalizeRows(a, inv_std) => {
                let c = g.cols() as f64;
                let mut ga = Mat::zeros(g.rows(), g.cols());
                for r in 0..g.rows() {
                    let (gr, yr) = (g.row(r), out.row(r));
                    let mean_g = gr.iter().sum::<f64>() / c;
                    let mean_gy = gr.iter().zip(yr).map(|(x, y)| x * y).sum::<f64>() / c;
                    for (o, (&gx, &y)) in ga.row_mut(r).iter_mut().zip(gr.iter().zip(yr)) {
                        *o = inv_std[r] * (gx - mean_g - y * mean_gy);
                    }
                }
                acc(*a, ga);
            }
            Op::Nll(a, targets) => {
                let am = self.value(*a);
                let mut ga = Mat::zeros(am.rows(), am.cols());
                for (r, &t) in targets.iter().enumerate() {
                    ga.set(r, t, -g.item());
                }
                acc(*a, ga);
            }
            Op::Unfold(a, width) => {
                let am = self.value(*a);
                let (n, d) = am.shape();
                let mut ga = Mat::zeros(n, d);
                for i in 0..g.rows() {
                    for k in 0..*width {
                        if i + k < n {
                            let src = &g.row(i)[k * d..(k + 1) * d];
                            for (o, &x) in ga.row_mut(i + k).iter_mut().zip(src) {
                                *o += x;
                            }
                        }
                    }
                }
                acc(*a, ga);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Compares the tape gradient of `f` with central differences on every input entry.
    fn check(inputs: Vec<Mat>, f: impl Fn(&mut Tape, &[Var]) -> Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|m| tape.var(m.clone())).collect();
        let loss = f(&mut tape, &vars);
        let grads = tape.backward(loss);
        let h = 1e-6;
        for (k, input) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[k]).cloned().unwrap_or_else(|| Mat::zeros(input.rows(), input.cols()));
            for idx in 0..input.len() {
                let eval = |delta: f64| {
                    let mut t = Tape::new();
                    let vs: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(j, m)| {
                            let mut m = m.clone();
                            if j == k {
                                m.data_mut()[idx] += delta;
                            }
                            t.var(m)
                        })
                        .collect();
                    let l = f(&mut t, &vs);
                    t.value(l).item()
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic.data()[idx];
                let denom = a.abs().max(numeric.abs()).max(1e-6);
                assert!((a - numeric).abs() / denom < 1e-5, "input {k} entry {idx}: analytic {a} numeric {numeric}");
            }
        }
    }

    #[test]
    fn matmul_softmax_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        check(vec![random(&mut rng, 3, 4), random(&mut rng, 4, 2)], |t, v| {
            let m = t.matmul(v[0], v[1]);
            let s = t.softmax_rows(m);
            let w = t.tanh(s);
            t.sum_sq(w)
        });
    }

    #[test]
    fn log_softmax_nll() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        check(vec![random(&mut rng, 3, 5)], |t, v| {
            let l = t.log_softmax_rows(v[0]);
            t.nll(l, &[0, 4, 2])
        });
    }

    #[test]
    fn elementwise_and_broadcast() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        check(vec![random(&mut rng, 3, 4), random(&mut rng, 1, 4), random(&mut rng, 3, 4)], |t, v| {
            let a = t.add_row(v[0], v[1]);
            let b = t.mul_row(v[2], v[1]);
            let c = t.mul(a, b);
            let d = t.sigmoid(c);
            let e = t.sub(d, v[2]);
            let f = t.gelu(e);
            let g = t.scale(f, 0.7);
            let h = t.exp(g);
            let i = t.log(h);
            t.sum(i)
        });
    }

    #[test]
    fn structural_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        check(vec![random(&mut rng, 4, 3), random(&mut rng, 2, 3)], |t, v| {
            let c = t.concat_rows(&[v[0], v[1]]);
            let s = t.slice_rows(c, 1, 4);
            let cc = t.concat_cols(&[s, s]);
            let sc = t.slice_cols(cc, 2, 3);
            let tr = t.transpose(sc);
            let g = t.gather_rows(tr, &[0, 2, 2]);
            let m = t.mean_rows(g);
            let n = t.normalize_rows(tr);
            let nm = t.max_rows(n);
            let mix = t.mul(m, nm);
            t.sum_sq(mix)
        });
    }

    #[test]
    fn unfold_and_scalar() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        check(vec![random(&mut rng, 2, 3), random(&mut rng, 9, 2), random(&mut rng, 1, 1)], |t, v| {
            let u = t.unfold(v[0], 3);
            let p = t.matmul(u, v[1]);
            let q = t.mul_scalar(p, v[2]);
            let r = t.tanh(q);
            t.sum_sq(r)
        });
    }

    #[test]
    fn repeated_param_binding_accumulates() {
        let mut store = ParamStore::new();
        let id = store.add("w", Mat::from_vec(1, 2, vec![1.0, 2.0]));
        let mut tape = Tape::new();
        let a = tape.param(&store, id);
        let b = tape.param(&store, id);
        assert_eq!(a, b);
        let s = tape.add(a, b);
        let l = tape.sum(s);
        let grads = tape.backward(l);
        assert_eq!(grads.get(a).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Mat::scalar(3.0));
        let v = tape.var(Mat::scalar(2.0));
        let m = tape.mul(c, v);
        let grads = tape.backward(m);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(v).unwrap().item(), 3.0);
    }
}
