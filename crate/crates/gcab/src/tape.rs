//! Reverse-mode autodiff over a linear tape of primitive ops.
//!
//! Every forward pass owns a private `Tape`. Ops record enough to replay
//! the chain rule in reverse topological order (which is just reverse
//! insertion order). Broadcasting is limited to scalar-with-tensor and
//! row-vector-over-matrix; anything else is a shape error.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Precision, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    AddRow(Var, Var),
    AddScalar(Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Matmul(Var, Var),
    Transpose(Var),
    Sigmoid(Var),
    Silu(Var),
    Log(Var),
    Exp(Var),
    SoftmaxRows(Var),
    LayerNormRows(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    Mean(Var),
    Sum(Var),
    BceWithLogits { logits: Var, targets: Tensor },
    SoftmaxXent { logits: Var, targets: Tensor },
    KlFromLogits { student: Var, teacher_probs: Tensor },
    CosineRows(Var, Var),
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

const LN_EPS: f64 = 1e-12;
const COS_EPS: f64 = 1e-8;

pub struct Tape {
    precision: Precision,
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    backward_done: bool,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new(precision: Precision) -> Self {
        Tape { precision, nodes: Vec::new(), grads: Vec::new(), backward_done: false }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { op: Op::Leaf, value, needs_grad: requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, op: Op, mut value: Tensor, needs_grad: bool, opname: &'static str) -> Result<Var> {
        value.quantize(self.precision);
        if !value.all_finite() {
            return Err(Error::NonFinite { op: opname.to_string() });
        }
        self.nodes.push(Node { op, value, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    // ── elementwise / broadcast ─────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let value = if ta.same_shape(tb) {
            ta.zip(tb, |x, y| x + y)?
        } else if tb.is_scalar() {
            let s = tb.item();
            ta.map(|x| x + s)
        } else if ta.is_scalar() {
            let s = ta.item();
            tb.map(|x| x + s)
        } else {
            return Err(Error::shape("add", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        };
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Add(a, b), value, ng, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.same_shape(tb) {
            return Err(Error::shape("sub", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let value = ta.zip(tb, |x, y| x - y)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Sub(a, b), value, ng, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let value = if ta.same_shape(tb) {
            ta.zip(tb, |x, y| x * y)?
        } else if tb.is_scalar() {
            let s = tb.item();
            ta.map(|x| x * s)
        } else if ta.is_scalar() {
            let s = ta.item();
            tb.map(|x| x * s)
        } else {
            return Err(Error::shape("mul", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        };
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Mul(a, b), value, ng, "mul")
    }

    /// Broadcast a 1xC row over every row of an RxC matrix (addition).
    pub fn add_row(&mut self, m: Var, r: Var) -> Result<Var> {
        let (tm, tr) = (self.value(m), self.value(r));
        if tr.rows() != 1 || tr.cols() != tm.cols() {
            return Err(Error::shape("add_row", format!("{:?} + row {:?}", tm.shape(), tr.shape())));
        }
        let mut value = tm.clone();
        let cols = tm.cols();
        for i in 0..tm.rows() {
            for j in 0..cols {
                let v = value.get(i, j) + tr.data()[j];
                value.set(i, j, v);
            }
        }
        let ng = self.needs(m) || self.needs(r);
        self.push(Op::AddRow(m, r), value, ng, "add_row")
    }

    /// Broadcast a 1xC row over every row of an RxC matrix (product).
    pub fn mul_row(&mut self, m: Var, r: Var) -> Result<Var> {
        let (tm, tr) = (self.value(m), self.value(r));
        if tr.rows() != 1 || tr.cols() != tm.cols() {
            return Err(Error::shape("mul_row", format!("{:?} * row {:?}", tm.shape(), tr.shape())));
        }
        let mut value = tm.clone();
        let cols = tm.cols();
        for i in 0..tm.rows() {
            for j in 0..cols {
                let v = value.get(i, j) * tr.data()[j];
                value.set(i, j, v);
            }
        }
        let ng = self.needs(m) || self.needs(r);
        self.push(Op::MulRow(m, r), value, ng, "mul_row")
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x + c);
        let ng = self.needs(a);
        self.push(Op::AddScalar(a), value, ng, "add_scalar")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x * c);
        let ng = self.needs(a);
        self.push(Op::Scale(a, c), value, ng, "scale")
    }

    // ── linear algebra ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Matmul(a, b), value, ng, "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose();
        let ng = self.needs(a);
        self.push(Op::Transpose(a), value, ng, "transpose")
    }

    // ── nonlinearities ──────────────────────────────────────────────

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(sigmoid);
        let ng = self.needs(a);
        self.push(Op::Sigmoid(a), value, ng, "sigmoid")
    }

    /// Smooth gated nonlinearity x * sigmoid(x).
    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x * sigmoid(x));
        let ng = self.needs(a);
        self.push(Op::Silu(a), value, ng, "silu")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(f64::ln);
        let ng = self.needs(a);
        self.push(Op::Log(a), value, ng, "log")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(f64::exp);
        let ng = self.needs(a);
        self.push(Op::Exp(a), value, ng, "exp")
    }

    /// Numerically stable softmax over each row.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let mut value = ta.clone();
        for i in 0..ta.rows() {
            let row = ta.row_slice(i);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&x| (x - mx).exp()).collect();
            let denom: f64 = exps.iter().sum();
            for (j, e) in exps.iter().enumerate() {
                value.set(i, j, e / denom);
            }
        }
        let ng = self.needs(a);
        self.push(Op::SoftmaxRows(a), value, ng, "softmax")
    }

    /// Per-row layer normalization (no affine part).
    pub fn layer_norm_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let n = ta.cols() as f64;
        let mut value = ta.clone();
        for i in 0..ta.rows() {
            let row = ta.row_slice(i);
            let mu: f64 = row.iter().sum::<f64>() / n;
            let var: f64 = row.iter().map(|&x| (x - mu) * (x - mu)).sum::<f64>() / n;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for j in 0..row.len() {
                value.set(i, j, (row[j] - mu) * inv);
            }
        }
        let ng = self.needs(a);
        self.push(Op::LayerNormRows(a), value, ng, "layer_norm")
    }

    // ── structure ───────────────────────────────────────────────────

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_rows", "empty input list"));
        }
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(Error::shape("concat_rows", format!("col mismatch {} vs {}", t.cols(), cols)));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let value = Tensor::new(rows, cols, data)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(Op::ConcatRows(parts.to_vec()), value, ng, "concat_rows")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols", "empty input list"));
        }
        let rows = self.value(parts[0]).rows();
        let mut total_cols = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(Error::shape("concat_cols", format!("row mismatch {} vs {}", t.rows(), rows)));
            }
            total_cols += t.cols();
        }
        let mut value = Tensor::zeros(rows, total_cols);
        let mut off = 0;
        for &p in parts {
            let t = self.value(p).clone();
            for i in 0..rows {
                for j in 0..t.cols() {
                    value.set(i, off + j, t.get(i, j));
                }
            }
            off += t.cols();
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(Op::ConcatCols(parts.to_vec()), value, ng, "concat_cols")
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let ta = self.value(a);
        if start >= end || end > ta.cols() {
            return Err(Error::shape("slice_cols", format!("[{start}, {end}) of {} cols", ta.cols())));
        }
        let mut value = Tensor::zeros(ta.rows(), end - start);
        for i in 0..ta.rows() {
            for j in start..end {
                value.set(i, j - start, ta.get(i, j));
            }
        }
        let ng = self.needs(a);
        self.push(Op::SliceCols(a, start, end), value, ng, "slice_cols")
    }

    // ── reductions and losses ───────────────────────────────────────

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).sum());
        let ng = self.needs(a);
        self.push(Op::Sum(a), value, ng, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).mean());
        let ng = self.needs(a);
        self.push(Op::Mean(a), value, ng, "mean")
    }

    /// Mean binary cross-entropy of sigmoid(logits) against targets in [0,1].
    pub fn bce_with_logits(&mut self, logits: Var, targets: Tensor) -> Result<Var> {
        let tl = self.value(logits);
        if !tl.same_shape(&targets) {
            return Err(Error::shape("bce_with_logits", format!("{:?} vs {:?}", tl.shape(), targets.shape())));
        }
        let mut acc = 0.0;
        for (&x, &y) in tl.data().iter().zip(targets.data()) {
            // softplus(x) - x*y, computed stably
            acc += x.max(0.0) - x * y + (-(x.abs())).exp().ln_1p();
        }
        let value = Tensor::scalar(acc / tl.len() as f64);
        let ng = self.needs(logits);
        self.push(Op::BceWithLogits { logits, targets }, value, ng, "bce_with_logits")
    }

    /// Mean per-row cross-entropy of softmax(logits) against one-hot targets.
    pub fn softmax_xent(&mut self, logits: Var, targets: Tensor) -> Result<Var> {
        let tl = self.value(logits);
        if !tl.same_shape(&targets) {
            return Err(Error::shape("softmax_xent", format!("{:?} vs {:?}", tl.shape(), targets.shape())));
        }
        let mut acc = 0.0;
        for i in 0..tl.rows() {
            let row = tl.row_slice(i);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|&x| (x - mx).exp()).sum::<f64>().ln();
            for (j, &x) in row.iter().enumerate() {
                let y = targets.get(i, j);
                if y != 0.0 {
                    acc -= y * (x - lse);
                }
            }
        }
        let value = Tensor::scalar(acc / tl.rows() as f64);
        let ng = self.needs(logits);
        self.push(Op::SoftmaxXent { logits, targets }, value, ng, "softmax_xent")
    }

    /// Mean per-row KL(teacher_probs || softmax(student_logits)).
    pub fn kl_from_logits(&mut self, student: Var, teacher_probs: Tensor) -> Result<Var> {
        let ts = self.value(student);
        if !ts.same_shape(&teacher_probs) {
            return Err(Error::shape(
                "kl_from_logits",
                format!("{:?} vs {:?}", ts.shape(), teacher_probs.shape()),
            ));
        }
        let mut acc = 0.0;
        for i in 0..ts.rows() {
            let row = ts.row_slice(i);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|&x| (x - mx).exp()).sum::<f64>().ln();
            for (j, &x) in row.iter().enumerate() {
                let p = teacher_probs.get(i, j);
                if p > 0.0 {
                    acc += p * (p.ln() - (x - lse));
                }
            }
        }
        let value = Tensor::scalar(acc / ts.rows() as f64);
        let ng = self.needs(student);
        self.push(Op::KlFromLogits { student, teacher_probs }, value, ng, "kl_from_logits")
    }

    /// Per-row cosine similarity of two RxC matrices; output is Rx1.
    /// Rows with (near-)zero norm get similarity 0 and no gradient.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.same_shape(tb) {
            return Err(Error::shape("cosine_rows", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let mut value = Tensor::zeros(ta.rows(), 1);
        let mut degenerate = false;
        for i in 0..ta.rows() {
            let (ra, rb) = (ta.row_slice(i), tb.row_slice(i));
            let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
            let na: f64 = ra.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = rb.iter().map(|x| x * x).sum::<f64>().sqrt();
            if na < COS_EPS || nb < COS_EPS {
                degenerate = true;
                value.set(i, 0, 0.0);
            } else {
                value.set(i, 0, dot / (na * nb));
            }
        }
        if degenerate {
            log::warn!("cosine_rows: zero-norm row; similarity forced to 0");
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::CosineRows(a, b), value, ng, "cosine_rows")
    }

    // ── backward ────────────────────────────────────────────────────

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Autodiff("backward called twice on the same tape".into()));
        }
        if self.nodes.is_empty() {
            return Err(Error::Autodiff("backward on an empty tape".into()));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Autodiff(format!(
                "backward requires a scalar loss, got {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_done = true;
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let g = match self.grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(idx, &g)?;
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var, contrib: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => {
                for (x, y) in g.data_mut().iter_mut().zip(contrib.data()) {
                    *x += y;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn propagate(&mut self, idx: usize, g: &Tensor) -> Result<()> {
        // Values are cheap to clone at the sizes this engine targets.
        match &self.nodes[idx].op {
            Op::Leaf => Ok(()),
            &Op::Add(a, b) => {
                let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
                if sa == sb {
                    self.acc(a, g.clone());
                    self.acc(b, g.clone());
                } else if sb == (1, 1) {
                    self.acc(a, g.clone());
                    self.acc(b, Tensor::scalar(g.sum()));
                } else {
                    self.acc(b, g.clone());
                    self.acc(a, Tensor::scalar(g.sum()));
                }
                Ok(())
            }
            &Op::Sub(a, b) => {
                self.acc(a, g.clone());
                self.acc(b, g.map(|x| -x));
                Ok(())
            }
            &Op::AddScalar(a) => {
                self.acc(a, g.clone());
                Ok(())
            }
            &Op::Scale(a, c) => {
                self.acc(a, g.map(|x| x * c));
                Ok(())
            }
            &Op::Mul(a, b) => {
                let (ta, tb) = (self.value(a).clone(), self.value(b).clone());
                if ta.same_shape(&tb) {
                    self.acc(a, g.zip(&tb, |x, y| x * y)?);
                    self.acc(b, g.zip(&ta, |x, y| x * y)?);
                } else if tb.is_scalar() {
                    let s = tb.item();
                    self.acc(a, g.map(|x| x * s));
                    self.acc(b, Tensor::scalar(g.zip(&ta, |x, y| x * y)?.sum()));
                } else {
                    let s = ta.item();
                    self.acc(b, g.map(|x| x * s));
                    self.acc(a, Tensor::scalar(g.zip(&tb, |x, y| x * y)?.sum()));
                }
                Ok(())
            }
            &Op::AddRow(m, r) => {
                let cols = self.value(m).cols();
                let mut gr = Tensor::zeros(1, cols);
                for i in 0..g.rows() {
                    for j in 0..cols {
                        gr.data_mut()[j] += g.get(i, j);
                    }
                }
                self.acc(m, g.clone());
                self.acc(r, gr);
                Ok(())
            }
            &Op::MulRow(m, r) => {
                let tm = self.value(m).clone();
                let tr = self.value(r).clone();
                let cols = tm.cols();
                let mut gm = g.clone();
                for i in 0..g.rows() {
                    for j in 0..cols {
                        let v = gm.get(i, j) * tr.data()[j];
                        gm.set(i, j, v);
                    }
                }
                let mut gr = Tensor::zeros(1, cols);
                for i in 0..g.rows() {
                    for j in 0..cols {
                        gr.data_mut()[j] += g.get(i, j) * tm.get(i, j);
                    }
                }
                self.acc(m, gm);
                self.acc(r, gr);
                Ok(())
            }
            &Op::Matmul(a, b) => {
                let (ta, tb) = (self.value(a).clone(), self.value(b).clone());
                let ga = g.matmul(&tb.transpose())?;
                let gb = ta.transpose().matmul(g)?;
                self.acc(a, ga);
                self.acc(b, gb);
                Ok(())
            }
            &Op::Transpose(a) => {
                self.acc(a, g.transpose());
                Ok(())
            }
            &Op::Sigmoid(a) => {
                let y = self.nodes[idx].value.clone();
                self.acc(a, g.zip(&y, |gi, yi| gi * yi * (1.0 - yi))?);
                Ok(())
            }
            &Op::Silu(a) => {
                let x = self.value(a).clone();
                self.acc(a, g.zip(&x, |gi, xi| {
                    let s = sigmoid(xi);
                    gi * (s + xi * s * (1.0 - s))
                })?);
                Ok(())
            }
            &Op::Log(a) => {
                let x = self.value(a).clone();
                self.acc(a, g.zip(&x, |gi, xi| gi / xi)?);
                Ok(())
            }
            &Op::Exp(a) => {
                let y = self.nodes[idx].value.clone();
                self.acc(a, g.zip(&y, |gi, yi| gi * yi)?);
                Ok(())
            }
            &Op::SoftmaxRows(a) => {
                let y = self.nodes[idx].value.clone();
                let mut gx = g.clone();
                for i in 0..y.rows() {
                    let dot: f64 = (0..y.cols()).map(|j| g.get(i, j) * y.get(i, j)).sum();
                    for j in 0..y.cols() {
                        gx.set(i, j, (g.get(i, j) - dot) * y.get(i, j));
                    }
                }
                self.acc(a, gx);
                Ok(())
            }
            &Op::LayerNormRows(a) => {
                let x = self.value(a).clone();
                let y = self.nodes[idx].value.clone();
                let n = x.cols() as f64;
                let mut gx = g.clone();
                for i in 0..x.rows() {
                    let row = x.row_slice(i);
                    let mu: f64 = row.iter().sum::<f64>() / n;
                    let var: f64 = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / n;
                    let inv = 1.0 / (var + LN_EPS).sqrt();
                    let gmean: f64 = (0..x.cols()).map(|j| g.get(i, j)).sum::<f64>() / n;
                    let gydot: f64 =
                        (0..x.cols()).map(|j| g.get(i, j) * y.get(i, j)).sum::<f64>() / n;
                    for j in 0..x.cols() {
                        gx.set(i, j, inv * (g.get(i, j) - gmean - y.get(i, j) * gydot));
                    }
                }
                self.acc(a, gx);
                Ok(())
            }
            Op::ConcatRows(parts) => {
                let parts = parts.clone();
                let mut off = 0;
                for p in parts {
                    let t = self.value(p).clone();
                    let mut gp = Tensor::zeros(t.rows(), t.cols());
                    for i in 0..t.rows() {
                        for j in 0..t.cols() {
                            gp.set(i, j, g.get(off + i, j));
                        }
                    }
                    off += t.rows();
                    self.acc(p, gp);
                }
                Ok(())
            }
            Op::ConcatCols(parts) => {
                let parts = parts.clone();
                let mut off = 0;
                for p in parts {
                    let t = self.value(p).clone();
                    let mut gp = Tensor::zeros(t.rows(), t.cols());
                    for i in 0..t.rows() {
                        for j in 0..t.cols() {
                            gp.set(i, j, g.get(i, off + j));
                        }
                    }
                    off += t.cols();
                    self.acc(p, gp);
                }
                Ok(())
            }
            &Op::SliceCols(a, start, _end) => {
                let ta = self.value(a).clone();
                let mut ga = Tensor::zeros(ta.rows(), ta.cols());
                for i in 0..g.rows() {
                    for j in 0..g.cols() {
                        ga.set(i, start + j, g.get(i, j));
                    }
                }
                self.acc(a, ga);
                Ok(())
            }
            &Op::Sum(a) => {
                let s = g.item();
                let ta = self.value(a);
                self.acc(a, Tensor::filled(ta.rows(), ta.cols(), s));
                Ok(())
            }
            &Op::Mean(a) => {
                let ta = self.value(a);
                let s = g.item() / ta.len() as f64;
                let (r, c) = ta.shape();
                self.acc(a, Tensor::filled(r, c, s));
                Ok(())
            }
            Op::BceWithLogits { logits, targets } => {
                let logits = *logits;
                let targets = targets.clone();
                let tl = self.value(logits).clone();
                let s = g.item() / tl.len() as f64;
                let gx = tl.zip(&targets, |x, y| (sigmoid(x) - y) * s)?;
                self.acc(logits, gx);
                Ok(())
            }
            Op::SoftmaxXent { logits, targets } => {
                let logits = *logits;
                let targets = targets.clone();
                let tl = self.value(logits).clone();
                let s = g.item() / tl.rows() as f64;
                let mut gx = Tensor::zeros(tl.rows(), tl.cols());
                for i in 0..tl.rows() {
                    let row = tl.row_slice(i);
                    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = row.iter().map(|&x| (x - mx).exp()).collect();
                    let denom: f64 = exps.iter().sum();
                    for j in 0..tl.cols() {
                        gx.set(i, j, (exps[j] / denom - targets.get(i, j)) * s);
                    }
                }
                self.acc(logits, gx);
                Ok(())
            }
            Op::KlFromLogits { student, teacher_probs } => {
                let student = *student;
                let p = teacher_probs.clone();
                let ts = self.value(student).clone();
                let s = g.item() / ts.rows() as f64;
                let mut gx = Tensor::zeros(ts.rows(), ts.cols());
                for i in 0..ts.rows() {
                    let row = ts.row_slice(i);
                    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = row.iter().map(|&x| (x - mx).exp()).collect();
                    let denom: f64 = exps.iter().sum();
                    for j in 0..ts.cols() {
                        gx.set(i, j, (exps[j] / denom - p.get(i, j)) * s);
                    }
                }
                self.acc(student, gx);
                Ok(())
            }
            &Op::CosineRows(a, b) => {
                let ta = self.value(a).clone();
                let tb = self.value(b).clone();
                let mut ga = Tensor::zeros(ta.rows(), ta.cols());
                let mut gb = Tensor::zeros(tb.rows(), tb.cols());
                for i in 0..ta.rows() {
                    let (ra, rb) = (ta.row_slice(i), tb.row_slice(i));
                    let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
                    let na: f64 = ra.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let nb: f64 = rb.iter().map(|x| x * x).sum::<f64>().sqrt();
                    if na < COS_EPS || nb < COS_EPS {
                        continue;
                    }
                    let c = dot / (na * nb);
                    let gi = g.get(i, 0);
                    for j in 0..ta.cols() {
                        ga.set(i, j, gi * (rb[j] / (na * nb) - c * ra[j] / (na * na)));
                        gb.set(i, j, gi * (ra[j] / (na * nb) - c * rb[j] / (nb * nb)));
                    }
                }
                self.acc(a, ga);
                self.acc(b, gb);
                Ok(())
            }
        }
    }
}

/// Named tape variables for a family of parameters.
pub struct VarMap {
    vars: HashMap<String, Var>,
}

impl VarMap {
    pub fn new() -> Self {
        VarMap { vars: HashMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, v: Var) {
        self.vars.insert(name.into(), v);
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Autodiff(format!("no tape variable bound for parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    /// Collect gradients for every bound parameter that received one
    /// (call after `Tape::backward`).
    pub fn gradients(&self, tape: &Tape) -> std::collections::BTreeMap<String, Tensor> {
        let mut out = std::collections::BTreeMap::new();
        for (name, &v) in &self.vars {
            if let Some(g) = tape.grad(v) {
                out.insert(name.clone(), g.clone());
            }
        }
        out
    }

    /// Bind every tensor in `params` as a tape leaf. `trainable` decides
    /// which leaves request gradients.
    pub fn bind<'a>(
        tape: &mut Tape,
        params: impl Iterator<Item = (&'a String, &'a Tensor)>,
        trainable: impl Fn(&str) -> bool,
    ) -> Self {
        let mut vm = VarMap::new();
        for (name, value) in params {
            let v = tape.leaf(value.clone(), trainable(name));
            vm.insert(name.clone(), v);
        }
        vm
    }
}

impl Default for VarMap {
    fn default() -> Self {
        Self::new()
    }
}
