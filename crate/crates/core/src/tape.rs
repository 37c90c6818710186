//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every operation eagerly; [`Tape::backward`] walks the
//! record in reverse. Nodes that do not depend on a leaf marked
//! `requires_grad` are skipped during the backward walk, so frozen parameters
//! cost nothing beyond their forward use.

use crate::scalar::Scalar;
use crate::tensor::Mat;
use std::sync::Arc;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Row-major `rows × cols` boolean matrix: `true` marks an allowed attention
/// entry.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub rows: usize,
    pub cols: usize,
    pub allowed: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                allowed.push(f(i, j));
            }
        }
        Self {
            rows,
            cols,
            allowed,
        }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.cols + j]
    }
}

enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, S),
    Relu(Var),
    LogSigmoid(Var),
    Softmax {
        input: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Mat<S>,
        inv_std: Vec<S>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows {
        input: Var,
        start: usize,
    },
    SliceCols {
        input: Var,
        start: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Mat<S>,
    },
    Sum(Var),
    MeanRows(Var),
    Dot(Var, Var),
}

struct Node<S> {
    value: Mat<S>,
    op: Op<S>,
    requires_grad: bool,
}

pub struct Tape<S: Scalar = f64> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

const LN_EPS: f64 = 1e-5;

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::with_capacity(1024),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat<S>, op: Op<S>, requires_grad: bool) -> Var {
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

    pub fn value(&self, v: Var) -> &Mat<S> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Differentiable input.
    pub fn param(&mut self, value: Mat<S>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Mat<S>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Mat<S>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_t(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMulT(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        v.axpy(-S::one(), self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape());
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let v = Mat::from_vec(va.rows(), va.cols(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    /// Adds the `1 × cols` row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let mut v = self.value(a).clone();
        let b = self.value(bias);
        assert_eq!(b.shape(), (1, v.cols()), "add_row bias shape");
        for r in 0..v.rows() {
            for (x, &y) in v.row_mut(r).iter_mut().zip(b.data()) {
                *x += y;
            }
        }
        let rg = self.rg(a) || self.rg(bias);
        self.push(v, Op::AddRow(a, bias), rg)
    }

    pub fn scale(&mut self, a: Var, alpha: S) -> Var {
        let mut v = self.value(a).clone();
        v.scale(alpha);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, alpha), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -S::one())
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self
            .value(a)
            .map(|x| if x.re() > 0.0 { x } else { S::zero() });
        let rg = self.rg(a);
        self.push(v, Op::Relu(a), rg)
    }

    /// Elementwise `ln σ(x)`, computed without overflow.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(log_sigmoid);
        let rg = self.rg(a);
        self.push(v, Op::LogSigmoid(a), rg)
    }

    /// Row-wise softmax. Masked-out entries are exactly zero; a fully masked
    /// row yields all zeros.
    pub fn softmax(&mut self, a: Var, mask: Option<Arc<Mask>>) -> Var {
        let x = self.value(a);
        let (rows, cols) = x.shape();
        if let Some(m) = &mask {
            assert_eq!((m.rows, m.cols), (rows, cols), "softmax mask shape");
        }
        let mut out = Mat::zeros(rows, cols);
        for r in 0..rows {
            let xr = x.row(r);
            let allowed = |j: usize| mask.as_ref().map_or(true, |m| m.get(r, j));
            let mut best: Option<S> = None;
            for (j, &v) in xr.iter().enumerate() {
                if allowed(j) && best.map_or(true, |b| v.re() > b.re()) {
                    best = Some(v);
                }
            }
            let Some(mx) = best else { continue };
            let orow = out.row_mut(r);
            let mut total = S::zero();
            for (j, &v) in xr.iter().enumerate() {
                if allowed(j) {
                    let e = (v - mx).exp();
                    orow[j] = e;
                    total += e;
                }
            }
            let inv = S::one() / total;
            for o in orow.iter_mut() {
                *o *= inv;
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::Softmax { input: a }, rg)
    }

    /// Row-wise layer normalisation with learned `1 × cols` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let g = self.value(gain);
        let b = self.value(bias);
        assert_eq!(g.shape(), (1, cols));
        assert_eq!(b.shape(), (1, cols));
        let n = S::from_f64(cols as f64);
        let mut xhat = Mat::zeros(rows, cols);
        let mut out = Mat::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let xr = xv.row(r);
            let mut mean = S::zero();
            for &v in xr {
                mean += v;
            }
            mean = mean / n;
            let mut var = S::zero();
            for &v in xr {
                let d = v - mean;
                var += d * d;
            }
            var = var / n;
            let is = S::one() / (var + S::from_f64(LN_EPS)).sqrt();
            inv_std.push(is);
            let hr = xhat.row_mut(r);
            for (h, &v) in hr.iter_mut().zip(xr) {
                *h = (v - mean) * is;
            }
            let hr = xhat.row(r).to_vec();
            let or = out.row_mut(r);
            for j in 0..cols {
                or[j] = hr[j] * g.data()[j] + b.data()[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Selects rows `ids` of `table` (embedding lookup).
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let cols = t.cols();
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            data.extend_from_slice(t.row(i));
        }
        let v = Mat::from_vec(ids.len(), cols, data);
        let rg = self.rg(table);
        self.push(
            v,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(m.data());
            rows += m.rows();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Mat::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_mut(r)[off..off + m.cols()].copy_from_slice(m.row(r));
            }
            off += m.cols();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let m = self.value(a);
        assert!(start + len <= m.rows());
        let cols = m.cols();
        let v = Mat::from_vec(len, cols, m.data()[start * cols..(start + len) * cols].to_vec());
        let rg = self.rg(a);
        self.push(v, Op::SliceRows { input: a, start }, rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let m = self.value(a);
        assert!(start + len <= m.cols());
        let mut v = Mat::zeros(m.rows(), len);
        for r in 0..m.rows() {
            v.row_mut(r).copy_from_slice(&m.row(r)[start..start + len]);
        }
        let rg = self.rg(a);
        self.push(v, Op::SliceCols { input: a, start }, rg)
    }

    /// `Σ_i w_i · (−ln softmax(logits_i)[t_i])` as a 1×1 node.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Var {
        let x = self.value(logits);
        assert_eq!(x.rows(), targets.len());
        assert_eq!(weights.len(), targets.len());
        let cols = x.cols();
        let mut probs = Mat::zeros(x.rows(), cols);
        let mut loss = S::zero();
        for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
            let xr = x.row(r);
            let mut mx = xr[0];
            for &v in xr {
                if v.re() > mx.re() {
                    mx = v;
                }
            }
            let mut total = S::zero();
            let pr = probs.row_mut(r);
            for (p, &v) in pr.iter_mut().zip(xr) {
                *p = (v - mx).exp();
                total += *p;
            }
            let inv = S::one() / total;
            for p in pr.iter_mut() {
                *p *= inv;
            }
            // −ln p_t = ln Σ exp(x − mx) − (x_t − mx)
            loss += S::from_f64(w) * (total.ln() - (xr[t] - mx));
        }
        let rg = self.rg(logits);
        self.push(
            Mat::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            rg,
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let mut acc = S::zero();
        for &v in self.value(a).data() {
            acc += v;
        }
        let rg = self.rg(a);
        self.push(Mat::scalar(acc), Op::Sum(a), rg)
    }

    /// Mean over rows: `n × c → 1 × c`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let (rows, cols) = m.shape();
        assert!(rows > 0, "mean_rows of empty matrix");
        let mut out = vec![S::zero(); cols];
        for r in 0..rows {
            for (o, &v) in out.iter_mut().zip(m.row(r)) {
                *o += v;
            }
        }
        let inv = S::one() / S::from_f64(rows as f64);
        out.iter_mut().for_each(|o| *o *= inv);
        let rg = self.rg(a);
        self.push(Mat::row_vector(out), Op::MeanRows(a), rg)
    }

    /// Frobenius inner product as a 1×1 node.
    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(Mat::scalar(v), Op::Dot(a, b), rg)
    }

    /// Gradients of the (1×1) node `loss` w.r.t. every node that requires them.
    pub fn backward(&self, loss: Var) -> Gradients<S> {
        let seed = Mat::filled(
            self.value(loss).rows(),
            self.value(loss).cols(),
            S::one(),
        );
        self.backward_seeded(loss, seed)
    }

    pub fn backward_seeded(&self, root: Var, seed: Mat<S>) -> Gradients<S> {
        assert_eq!(seed.shape(), self.value(root).shape());
        let mut grads: Vec<Option<Mat<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(root) {
            return Gradients { grads };
        }
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, g, &mut grads);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, node: &Node<S>, g: Mat<S>, grads: &mut [Option<Mat<S>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    let ga = g.matmul_t(self.value(*b));
                    accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    let gb = self.value(*a).t_matmul(&g);
                    accumulate(grads, *b, gb);
                }
            }
            Op::MatMulT(a, b) => {
                // c = a bᵀ: da = g b, db = gᵀ a
                if self.rg(*a) {
                    let ga = g.matmul(self.value(*b));
                    accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    let gb = g.t_matmul(self.value(*a));
                    accumulate(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                if self.rg(*a) && self.rg(*b) {
                    accumulate(grads, *a, g.clone());
                    accumulate(grads, *b, g);
                } else if self.rg(*a) {
                    accumulate(grads, *a, g);
                } else if self.rg(*b) {
                    accumulate(grads, *b, g);
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*b) {
                    let mut gb = g.clone();
                    gb.scale(-S::one());
                    accumulate(grads, *b, gb);
                }
                if self.rg(*a) {
                    accumulate(grads, *a, g);
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let vb = self.value(*b);
                    let d = g.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
                    accumulate(grads, *a, Mat::from_vec(g.rows(), g.cols(), d));
                }
                if self.rg(*b) {
                    let va = self.value(*a);
                    let d = g.data().iter().zip(va.data()).map(|(&x, &y)| x * y).collect();
                    accumulate(grads, *b, Mat::from_vec(g.rows(), g.cols(), d));
                }
            }
            Op::AddRow(a, bias) => {
                if self.rg(*bias) {
                    let mut gb = vec![S::zero(); g.cols()];
                    for r in 0..g.rows() {
                        for (o, &v) in gb.iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    accumulate(grads, *bias, Mat::row_vector(gb));
                }
                if self.rg(*a) {
                    accumulate(grads, *a, g);
                }
            }
            Op::Scale(a, alpha) => {
                let mut ga = g;
                ga.scale(*alpha);
                accumulate(grads, *a, ga);
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let d = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&gv, &xv)| if xv.re() > 0.0 { gv } else { S::zero() })
                    .collect();
                accumulate(grads, *a, Mat::from_vec(g.rows(), g.cols(), d));
            }
            Op::LogSigmoid(a) => {
                // d/dx ln σ(x) = σ(−x)
                let x = self.value(*a);
                let d = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&gv, &xv)| gv * sigmoid(-xv))
                    .collect();
                accumulate(grads, *a, Mat::from_vec(g.rows(), g.cols(), d));
            }
            Op::Softmax { input, .. } => {
                let y = &node.value;
                let mut gx = Mat::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let mut s = S::zero();
                    for (&a, &b) in yr.iter().zip(gr) {
                        s += a * b;
                    }
                    let out = gx.row_mut(r);
                    for j in 0..yr.len() {
                        out[j] = yr[j] * (gr[j] - s);
                    }
                }
                accumulate(grads, *input, gx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (rows, cols) = xhat.shape();
                let gv = self.value(*gain);
                if self.rg(*gain) {
                    let mut gg = vec![S::zero(); cols];
                    for r in 0..rows {
                        for j in 0..cols {
                            gg[j] += g.get(r, j) * xhat.get(r, j);
                        }
                    }
                    accumulate(grads, *gain, Mat::row_vector(gg));
                }
                if self.rg(*bias) {
                    let mut gb = vec![S::zero(); cols];
                    for r in 0..rows {
                        for (o, &v) in gb.iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    accumulate(grads, *bias, Mat::row_vector(gb));
                }
                if self.rg(*x) {
                    let n = S::from_f64(cols as f64);
                    let mut gx = Mat::zeros(rows, cols);
                    let mut dxhat = vec![S::zero(); cols];
                    for r in 0..rows {
                        let mut m1 = S::zero();
                        let mut m2 = S::zero();
                        for j in 0..cols {
                            dxhat[j] = g.get(r, j) * gv.data()[j];
                            m1 += dxhat[j];
                            m2 += dxhat[j] * xhat.get(r, j);
                        }
                        m1 = m1 / n;
                        m2 = m2 / n;
                        let is = inv_std[r];
                        let out = gx.row_mut(r);
                        for j in 0..cols {
                            out[j] = is * (dxhat[j] - m1 - xhat.get(r, j) * m2);
                        }
                    }
                    accumulate(grads, *x, gx);
                }
            }
            Op::Gather { table, ids } => {
                let t = self.value(*table);
                let entry = grads[table.0].get_or_insert_with(|| Mat::zeros(t.rows(), t.cols()));
                for (r, &id) in ids.iter().enumerate() {
                    for (o, &v) in entry.row_mut(id).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                let cols = g.cols();
                for &p in parts {
                    let rows = self.value(p).rows();
                    if self.rg(p) {
                        let d = g.data()[off * cols..(off + rows) * cols].to_vec();
                        accumulate(grads, p, Mat::from_vec(rows, cols, d));
                    }
                    off += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    if self.rg(p) {
                        let mut gp = Mat::zeros(g.rows(), pc);
                        for r in 0..g.rows() {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + pc]);
                        }
                        accumulate(grads, p, gp);
                    }
                    off += pc;
                }
            }
            Op::SliceRows { input, start } => {
                let src = self.value(*input);
                let entry =
                    grads[input.0].get_or_insert_with(|| Mat::zeros(src.rows(), src.cols()));
                for r in 0..g.rows() {
                    for (o, &v) in entry.row_mut(start + r).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
            }
            Op::SliceCols { input, start } => {
                let src = self.value(*input);
                let entry =
                    grads[input.0].get_or_insert_with(|| Mat::zeros(src.rows(), src.cols()));
                for r in 0..g.rows() {
                    let row = entry.row_mut(r);
                    for (j, &v) in g.row(r).iter().enumerate() {
                        row[start + j] += v;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let gs = g.item();
                let mut gx = probs.clone();
                for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    let scale = gs * S::from_f64(w);
                    let row = gx.row_mut(r);
                    row[t] -= S::one();
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
                accumulate(grads, *logits, gx);
            }
            Op::Sum(a) => {
                let m = self.value(*a);
                accumulate(grads, *a, Mat::filled(m.rows(), m.cols(), g.item()));
            }
            Op::MeanRows(a) => {
                let m = self.value(*a);
                let inv = S::one() / S::from_f64(m.rows() as f64);
                let mut ga = Mat::zeros(m.rows(), m.cols());
                for r in 0..m.rows() {
                    for (o, &v) in ga.row_mut(r).iter_mut().zip(g.data()) {
                        *o = v * inv;
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::Dot(a, b) => {
                let gs = g.item();
                if self.rg(*a) {
                    let mut ga = self.value(*b).clone();
                    ga.scale(gs);
                    accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    let mut gb = self.value(*a).clone();
                    gb.scale(gs);
                    accumulate(grads, *b, gb);
                }
            }
        }
    }
}

fn accumulate<S: Scalar>(grads: &mut [Option<Mat<S>>], v: Var, g: Mat<S>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

pub fn sigmoid<S: Scalar>(x: S) -> S {
    if x.re() >= 0.0 {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

pub fn log_sigmoid<S: Scalar>(x: S) -> S {
    if x.re() >= 0.0 {
        -(S::one() + (-x).exp()).ln()
    } else {
        x - (S::one() + x.exp()).ln()
    }
}

/// Result of a backward pass.
pub struct Gradients<S: Scalar = f64> {
    grads: Vec<Option<Mat<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Mat<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Mat<S>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Gradient of `v`, or zeros of the given shape when nothing flowed in.
    pub fn take_or_zeros(&mut self, v: Var, rows: usize, cols: usize) -> Mat<S> {
        self.take(v).unwrap_or_else(|| Mat::zeros(rows, cols))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of d(build)/d(inputs) for a scalar-valued
    /// graph builder.
    fn check_grad(inputs: Vec<Mat>, build: impl Fn(&mut Tape, &[Var]) -> Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|m| tape.param(m.clone())).collect();
        let out = build(&mut tape, &vars);
        let mut grads = tape.backward(out);
        let h = 1e-5;
        for (k, m) in inputs.iter().enumerate() {
            let analytic = grads.take_or_zeros(vars[k], m.rows(), m.cols());
            for idx in 0..m.len() {
                let eval = |delta: f64| {
                    let mut perturbed = inputs.clone();
                    perturbed[k].data_mut()[idx] += delta;
                    let mut t = Tape::new();
                    let vs: Vec<Var> = perturbed.into_iter().map(|p| t.param(p)).collect();
                    let o = build(&mut t, &vs);
                    t.value(o).item()
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic.data()[idx];
                assert!(
                    (a - fd).abs() / (1.0 + a.abs()) < 1e-6,
                    "input {k} idx {idx}: analytic {a} vs fd {fd}"
                );
            }
        }
    }

    fn rnd(rows: usize, cols: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::randn(rows, cols, 1.0, &mut rng)
    }

    #[test]
    fn matmul_family_gradients() {
        check_grad(vec![rnd(3, 4, 1), rnd(4, 2, 2)], |t, v| {
            let p = t.matmul(v[0], v[1]);
            t.sum(p)
        });
        check_grad(vec![rnd(3, 4, 3), rnd(5, 4, 4), rnd(3, 5, 5)], |t, v| {
            let p = t.matmul_t(v[0], v[1]);
            t.dot(p, v[2])
        });
    }

    #[test]
    fn elementwise_gradients() {
        check_grad(vec![rnd(2, 3, 6), rnd(2, 3, 7), rnd(1, 3, 8)], |t, v| {
            let a = t.mul(v[0], v[1]);
            let b = t.sub(a, v[1]);
            let c = t.add_row(b, v[2]);
            let d = t.relu(c);
            let e = t.log_sigmoid(d);
            let f = t.scale(e, 0.7);
            let g = t.add(f, v[0]);
            t.sum(g)
        });
    }

    #[test]
    fn softmax_and_layer_norm_gradients() {
        let mask = Arc::new(Mask::new(3, 4, |i, j| j <= i + 1));
        check_grad(vec![rnd(3, 4, 9), rnd(3, 4, 10)], move |t, v| {
            let s = t.softmax(v[0], Some(mask.clone()));
            t.dot(s, v[1])
        });
        check_grad(
            vec![rnd(3, 5, 11), rnd(1, 5, 12), rnd(1, 5, 13), rnd(3, 5, 14)],
            |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2]);
                t.dot(y, v[3])
            },
        );
    }

    #[test]
    fn structural_gradients() {
        check_grad(vec![rnd(5, 3, 15), rnd(2, 3, 16), rnd(4, 6, 17)], |t, v| {
            let g = t.gather(v[0], &[4, 1, 1, 0]);
            let c = t.concat_rows(&[g, v[1]]);
            let s = t.slice_rows(c, 1, 4);
            let s2 = t.slice_cols(s, 1, 2);
            let s3 = t.slice_cols(s, 0, 1);
            let cc = t.concat_cols(&[s2, s3, s]);
            let m = t.mean_rows(cc);
            let w = t.slice_rows(v[2], 0, 1);
            t.dot(m, w)
        });
    }

    #[test]
    fn cross_entropy_gradient_and_value() {
        check_grad(vec![rnd(3, 5, 18)], |t, v| {
            t.cross_entropy(v[0], &[0, 4, 2], &[0.5, 0.25, 0.25])
        });
        let mut t: Tape = Tape::new();
        let x = t.constant(Mat::zeros(2, 7));
        let l = t.cross_entropy(x, &[1, 3], &[0.5, 0.5]);
        assert!((t.value(l).item() - 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn fully_masked_row_is_zero() {
        let mut t: Tape = Tape::new();
        let x = t.param(rnd(2, 3, 19));
        let mask = Arc::new(Mask::new(2, 3, |i, _| i == 0));
        let s = t.softmax(x, Some(mask));
        assert!(t.value(s).row(1).iter().all(|&v| v == 0.0));
        let sum: f64 = t.value(s).row(0).iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn frozen_leaves_receive_no_gradient() {
        let mut t: Tape = Tape::new();
        let a = t.constant(rnd(2, 2, 20));
        let b = t.param(rnd(2, 2, 21));
        let p = t.matmul(a, b);
        let l = t.sum(p);
        let g = t.backward(l);
        assert!(g.get(a).is_none());
        assert!(g.get(b).is_some());
    }

    #[test]
    fn log_sigmoid_is_stable() {
        assert!((log_sigmoid(-800.0f64) + 800.0).abs() < 1e-9);
        assert!(log_sigmoid(800.0f64).abs() < 1e-12);
        assert!((sigmoid(0.0f64) - 0.5).abs() < 1e-15);
    }
}
