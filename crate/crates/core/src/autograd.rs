//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its nodes in creation
//! order, which is already a topological order. [`Graph::backward`] walks
//! the tape once in reverse and accumulates `∂loss/∂leaf` into every leaf
//! created with `requires_grad`. Calling `backward` again without
//! [`Graph::zero_grad`] adds to the existing leaf gradients.
//!
//! A graph built with [`Graph::inference`] records nothing and produces
//! the same forward values.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Operation kinds, used for diagnostics and fault injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    AddBias,
    Sub,
    Mul,
    Scale,
    Sigmoid,
    Tanh,
    Relu,
    Softmax,
    LogSoftmax,
    Sum,
    Mean,
    Concat,
    SliceLast,
    GatherRows,
    Reshape,
    Conv1d,
    MaxOverTime,
    PickNll,
    ModifiedSce,
    BceWithLogits,
}

impl OpKind {
    const ALL: [OpKind; 23] = [
        OpKind::Leaf,
        OpKind::MatMul,
        OpKind::Add,
        OpKind::AddBias,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::Sigmoid,
        OpKind::Tanh,
        OpKind::Relu,
        OpKind::Softmax,
        OpKind::LogSoftmax,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::Concat,
        OpKind::SliceLast,
        OpKind::GatherRows,
        OpKind::Reshape,
        OpKind::Conv1d,
        OpKind::MaxOverTime,
        OpKind::PickNll,
        OpKind::ModifiedSce,
        OpKind::BceWithLogits,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::AddBias => "add_bias",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Relu => "relu",
            OpKind::Softmax => "softmax",
            OpKind::LogSoftmax => "log_softmax",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Concat => "concat",
            OpKind::SliceLast => "slice_last",
            OpKind::GatherRows => "gather_rows",
            OpKind::Reshape => "reshape",
            OpKind::Conv1d => "conv1d",
            OpKind::MaxOverTime => "max_over_time",
            OpKind::PickNll => "pick_nll",
            OpKind::ModifiedSce => "modified_sce",
            OpKind::BceWithLogits => "bce_with_logits",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Contract(format!("unknown op kind '{s}'")))
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    Concat(Vec<Var>),
    SliceLast {
        input: Var,
        start: usize,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    Reshape(Var),
    Conv1d {
        seq: Var,
        filters: Var,
        bias: Var,
    },
    MaxOverTime {
        input: Var,
        argmax: Vec<usize>,
    },
    PickNll {
        input: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
    },
    ModifiedSce {
        logits: Var,
        labels: Vec<f64>,
        weights: [f64; 3],
    },
    BceWithLogits {
        logits: Var,
        labels: Vec<f64>,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::AddBias(..) => OpKind::AddBias,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Relu(_) => OpKind::Relu,
            Op::Softmax(_) => OpKind::Softmax,
            Op::LogSoftmax(_) => OpKind::LogSoftmax,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::Concat(_) => OpKind::Concat,
            Op::SliceLast { .. } => OpKind::SliceLast,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Conv1d { .. } => OpKind::Conv1d,
            Op::MaxOverTime { .. } => OpKind::MaxOverTime,
            Op::PickNll { .. } => OpKind::PickNll,
            Op::ModifiedSce { .. } => OpKind::ModifiedSce,
            Op::BceWithLogits { .. } => OpKind::BceWithLogits,
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Recorded computation over [`Tensor`] values.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    record: bool,
    fault: Option<OpKind>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-class binary cross-entropy on a logit, `-[y ln σ(s) + (1-y) ln(1-σ(s))]`.
pub(crate) fn bce_logit(s: f64, y: f64) -> f64 {
    s.max(0.0) - s * y + (-s.abs()).exp().ln_1p()
}

/// Guard for the soft recall / soft true-negative denominators.
pub const SOFT_RATIO_EPS: f64 = 1e-8;

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            record: true,
            fault: None,
        }
    }

    /// A graph that only evaluates; no operation is recorded.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            record: false,
            fault: None,
        }
    }

    /// Scales the backward contribution of every `kind` op by 1.5.
    /// Exists to prove the gradient checker catches a broken rule.
    #[doc(hidden)]
    pub fn corrupt_backward(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: requires_grad && self.record,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf; zeros when nothing reached it.
    pub fn grad(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        node.grad.clone().unwrap_or_else(|| Tensor::zeros(node.value.shape()))
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = self.record && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let src = &self.nodes[a.0].value;
        let data = src.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::from_parts(src.shape().to_vec(), data);
        self.push(value, op, &[a])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::dim(op, sa, sb));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push(value, op, &[a, b])
    }

    /// `[r×k] · [k×c] → [r×c]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (r, k, c) = (sa[0], sa[1], sb[1]);
        let data = tensor::matmul_kernel(self.nodes[a.0].value.data(), self.nodes[b.0].value.data(), r, k, c);
        Ok(self.push(Tensor::from_parts(vec![r, c], data), Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    /// Adds a bias vector to every row of `a` (bias length = last extent).
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(bias));
        let cols = *sa.last().unwrap_or(&1);
        if sb.len() != 1 || sb[0] != cols {
            return Err(Error::dim("add_bias", sa, sb));
        }
        let ta = &self.nodes[a.0].value;
        let tb = self.nodes[bias.0].value.data();
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(cols) {
            for (x, &b) in row.iter_mut().zip(tb) {
                *x += b;
            }
        }
        let value = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.push(value, Op::AddBias(a, bias), &[a, bias]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, tensor::sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let value = tensor::softmax(&self.nodes[a.0].value);
        self.push(value, Op::Softmax(a), &[a])
    }

    /// Log-softmax over the last axis (log-sum-exp form).
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let src = &self.nodes[a.0].value;
        let cols = src.cols();
        let mut out = vec![0.0; src.len()];
        for (row, dst) in src.data().chunks(cols).zip(out.chunks_mut(cols)) {
            tensor::log_softmax_row(row, dst);
        }
        let value = Tensor::from_parts(src.shape().to_vec(), out);
        self.push(value, Op::LogSoftmax(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Concatenates along the last axis; all inputs share their leading extents.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let lead = self.shape(first)[..self.shape(first).len() - 1].to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return Err(Error::dim("concat", self.shape(first), s));
            }
            total += s[s.len() - 1];
        }
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.nodes[p.0].value.row(r));
            }
        }
        let mut shape = lead;
        shape.push(total);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Concat(parts.to_vec()), parts))
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let src = &self.nodes[a.0].value;
        let cols = src.cols();
        if len == 0 || start + len > cols {
            return Err(Error::Index {
                index: start + len,
                bound: cols,
            });
        }
        let mut data = Vec::with_capacity(src.rows() * len);
        for row in src.data().chunks(cols) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = src.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        Ok(self.push(Tensor::from_parts(shape, data), Op::SliceLast { input: a, start }, &[a]))
    }

    /// Row lookup `table[ids[i]]`, giving `[ids.len() × d]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = &self.nodes[table.0].value;
        if t.rank() != 2 {
            return Err(Error::dim("gather_rows", t.shape(), &[2]));
        }
        let (n_rows, d) = (t.shape()[0], t.shape()[1]);
        if ids.is_empty() {
            return Err(Error::Contract("gather_rows with no ids".into()));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= n_rows {
                return Err(Error::Index {
                    index: id,
                    bound: n_rows,
                });
            }
            data.extend_from_slice(t.row(id));
        }
        Ok(self.push(
            Tensor::from_parts(vec![ids.len(), d], data),
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.nodes[a.0].value.reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    /// Valid 1-D convolution of `seq: [B, M, d]` with a filter bank
    /// `filters: [F, h, d]` and `bias: [F]`, giving `[B, M-h+1, F]`.
    ///
    /// Output `(b, j, f)` is the sum of `seq[b, j..j+h, :] ⊙ filters[f]`
    /// plus `bias[f]`; no activation is applied.
    pub fn conv1d_valid(&mut self, seq: Var, filters: Var, bias: Var) -> Result<Var> {
        let (ss, sf, sb) = (self.shape(seq), self.shape(filters), self.shape(bias));
        if ss.len() != 3 || sf.len() != 3 || ss[2] != sf[2] {
            return Err(Error::dim("conv1d_valid", ss, sf));
        }
        if sb.len() != 1 || sb[0] != sf[0] {
            return Err(Error::dim("conv1d_valid", sf, sb));
        }
        let (batch, m, d) = (ss[0], ss[1], ss[2]);
        let (nf, h) = (sf[0], sf[1]);
        if h > m {
            return Err(Error::Window { width: h, len: m });
        }
        let l = m - h + 1;
        let win = h * d;
        let xs = self.nodes[seq.0].value.data();
        let ws = self.nodes[filters.0].value.data();
        let bs = self.nodes[bias.0].value.data();
        let mut out = vec![0.0; batch * l * nf];
        for b in 0..batch {
            let sample = &xs[b * m * d..(b + 1) * m * d];
            for j in 0..l {
                let window = &sample[j * d..j * d + win];
                let orow = &mut out[(b * l + j) * nf..(b * l + j + 1) * nf];
                for (f, o) in orow.iter_mut().enumerate() {
                    *o = tensor::dot(window, &ws[f * win..(f + 1) * win]) + bs[f];
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![batch, l, nf], out),
            Op::Conv1d { seq, filters, bias },
            &[seq, filters, bias],
        ))
    }

    /// Max over axis 1 of `[B, L, F]`, giving `[B, F]`. Ties resolve to
    /// the lowest position and the gradient flows only to that position.
    pub fn max_over_time(&mut self, a: Var) -> Result<Var> {
        let src = &self.nodes[a.0].value;
        if src.rank() != 3 {
            return Err(Error::dim("max_over_time", src.shape(), &[0, 0, 0]));
        }
        let (batch, l, nf) = (src.shape()[0], src.shape()[1], src.shape()[2]);
        let xs = src.data();
        let mut out = vec![f64::NEG_INFINITY; batch * nf];
        let mut argmax = vec![0usize; batch * nf];
        for b in 0..batch {
            for j in 0..l {
                let row = &xs[(b * l + j) * nf..(b * l + j + 1) * nf];
                for f in 0..nf {
                    if row[f] > out[b * nf + f] {
                        out[b * nf + f] = row[f];
                        argmax[b * nf + f] = j;
                    }
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![batch, nf], out),
            Op::MaxOverTime { input: a, argmax },
            &[a],
        ))
    }

    /// `-Σ_n weights[n] · input[n, targets[n]]` over rows of a `[N, V]`
    /// log-probability matrix. Rows with weight 0 are masked out.
    pub fn pick_nll(&mut self, input: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let src = &self.nodes[input.0].value;
        let (rows, cols) = (src.rows(), src.cols());
        if targets.len() != rows || weights.len() != rows {
            return Err(Error::dim("pick_nll", src.shape(), &[targets.len()]));
        }
        let mut total = 0.0;
        for (n, (&t, &w)) in targets.iter().zip(weights).enumerate() {
            if w == 0.0 {
                continue;
            }
            if t >= cols {
                return Err(Error::Index { index: t, bound: cols });
            }
            total -= w * src.data()[n * cols + t];
        }
        Ok(self.push(
            Tensor::scalar(total),
            Op::PickNll {
                input,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
            &[input],
        ))
    }

    /// Batch mean of the recall/specificity-augmented sigmoid
    /// cross-entropy over logits `[B, K]`:
    ///
    /// `w0·Σ_j bce(s_j, y_j) − w1·Σ y_j σ_j / (Σ y_j + ε) − w2·Σ (1−y_j)(1−σ_j) / (Σ (1−y_j) + ε)`
    pub fn modified_sce(&mut self, logits: Var, labels: &[f64], weights: [f64; 3]) -> Result<Var> {
        let src = &self.nodes[logits.0].value;
        if labels.len() != src.len() {
            return Err(Error::dim("modified_sce", src.shape(), &[labels.len()]));
        }
        let (rows, k) = (src.rows(), src.cols());
        let mut total = 0.0;
        for i in 0..rows {
            let s = &src.data()[i * k..(i + 1) * k];
            let y = &labels[i * k..(i + 1) * k];
            let mut bce = 0.0;
            let (mut tp, mut pos, mut tn, mut neg) = (0.0, 0.0, 0.0, 0.0);
            for (&sj, &yj) in s.iter().zip(y) {
                bce += bce_logit(sj, yj);
                let p = tensor::sigmoid(sj);
                tp += yj * p;
                pos += yj;
                tn += (1.0 - yj) * (1.0 - p);
                neg += 1.0 - yj;
            }
            let recall = tp / (pos + SOFT_RATIO_EPS);
            let tnr = tn / (neg + SOFT_RATIO_EPS);
            total += weights[0] * bce - weights[1] * recall - weights[2] * tnr;
        }
        let value = Tensor::scalar(total / rows as f64);
        Ok(self.push(
            value,
            Op::ModifiedSce {
                logits,
                labels: labels.to_vec(),
                weights,
            },
            &[logits],
        ))
    }

    /// Batch mean of per-instance summed binary cross-entropy over logits `[B, K]`.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[f64]) -> Result<Var> {
        let src = &self.nodes[logits.0].value;
        if labels.len() != src.len() {
            return Err(Error::dim("bce_with_logits", src.shape(), &[labels.len()]));
        }
        let (rows, k) = (src.rows(), src.cols());
        let mut total = 0.0;
        for (x, y) in src.data().chunks(k).zip(labels.chunks(k)).take(rows) {
            let mut bce = 0.0;
            for (&s, &t) in x.iter().zip(y) {
                bce += bce_logit(s, t);
            }
            total += bce;
        }
        let value = Tensor::scalar(total / rows as f64);
        Ok(self.push(
            value,
            Op::BceWithLogits {
                logits,
                labels: labels.to_vec(),
            },
            &[logits],
        ))
    }

    /// Propagates `∂loss/∂·` back to every gradient-requiring leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut leaf_grads: Vec<(usize, Vec<f64>)> = Vec::new();
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaf_grads.push((idx, g));
                continue;
            }
            let mut contribs = self.node_backward(node, &g);
            if self.fault == Some(node.op.kind()) {
                for (_, c) in &mut contribs {
                    c.iter_mut().for_each(|x| *x *= 1.5);
                }
            }
            for (v, c) in contribs {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(c),
                }
            }
        }
        for (idx, g) in leaf_grads {
            let node = &mut self.nodes[idx];
            match &mut node.grad {
                Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => node.grad = Some(Tensor::from_parts(node.value.shape().to_vec(), g)),
            }
        }
        Ok(())
    }

    fn node_backward(&self, node: &Node, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let val = |v: Var| self.nodes[v.0].value.data();
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let out = node.value.data();
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (r, k, c) = (sa[0], sa[1], sb[1]);
                let mut res = Vec::with_capacity(2);
                if needs(*a) {
                    res.push((*a, tensor::matmul_a_bt(g, val(*b), r, k, c)));
                }
                if needs(*b) {
                    res.push((*b, tensor::matmul_at_b(val(*a), g, r, k, c)));
                }
                res
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|x| -x).collect())],
            Op::Mul(a, b) => {
                let ga = g.iter().zip(val(*b)).map(|(g, y)| g * y).collect();
                let gb = g.iter().zip(val(*a)).map(|(g, x)| g * x).collect();
                vec![(*a, ga), (*b, gb)]
            }
            Op::AddBias(a, b) => {
                let cols = self.shape(*b)[0];
                let mut gb = vec![0.0; cols];
                for row in g.chunks(cols) {
                    gb.iter_mut().zip(row).for_each(|(acc, x)| *acc += x);
                }
                vec![(*a, g.to_vec()), (*b, gb)]
            }
            Op::Scale(a, s) => vec![(*a, g.iter().map(|x| x * s).collect())],
            Op::Sigmoid(a) => vec![(*a, g.iter().zip(out).map(|(g, y)| g * y * (1.0 - y)).collect())],
            Op::Tanh(a) => vec![(*a, g.iter().zip(out).map(|(g, y)| g * (1.0 - y * y)).collect())],
            Op::Relu(a) => vec![(
                *a,
                g.iter()
                    .zip(val(*a))
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect(),
            )],
            Op::Softmax(a) => {
                let cols = node.value.cols();
                let mut ga = vec![0.0; g.len()];
                for ((gr, yr), dst) in g.chunks(cols).zip(out.chunks(cols)).zip(ga.chunks_mut(cols)) {
                    let inner = tensor::dot(gr, yr);
                    for ((d, gv), yv) in dst.iter_mut().zip(gr).zip(yr) {
                        *d = yv * (gv - inner);
                    }
                }
                vec![(*a, ga)]
            }
            Op::LogSoftmax(a) => {
                let cols = node.value.cols();
                let mut ga = vec![0.0; g.len()];
                for ((gr, yr), dst) in g.chunks(cols).zip(out.chunks(cols)).zip(ga.chunks_mut(cols)) {
                    let total: f64 = gr.iter().sum();
                    for ((d, gv), yv) in dst.iter_mut().zip(gr).zip(yr) {
                        *d = gv - yv.exp() * total;
                    }
                }
                vec![(*a, ga)]
            }
            Op::Sum(a) => vec![(*a, vec![g[0]; self.nodes[a.0].value.len()])],
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.len();
                vec![(*a, vec![g[0] / n as f64; n])]
            }
            Op::Concat(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut offset = 0;
                let mut res = Vec::with_capacity(parts.len());
                for &p in parts {
                    let w = self.nodes[p.0].value.cols();
                    let mut gp = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        gp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                    }
                    offset += w;
                    res.push((p, gp));
                }
                res
            }
            Op::SliceLast { input, start } => {
                let cols = self.nodes[input.0].value.cols();
                let w = node.value.cols();
                let mut ga = vec![0.0; self.nodes[input.0].value.len()];
                for (dst, src) in ga.chunks_mut(cols).zip(g.chunks(w)) {
                    dst[*start..*start + w].copy_from_slice(src);
                }
                vec![(*input, ga)]
            }
            Op::GatherRows { table, ids } => {
                let t = &self.nodes[table.0].value;
                let d = t.cols();
                let mut gt = vec![0.0; t.len()];
                for (i, &id) in ids.iter().enumerate() {
                    let dst = &mut gt[id * d..(id + 1) * d];
                    dst.iter_mut().zip(&g[i * d..(i + 1) * d]).for_each(|(a, b)| *a += b);
                }
                vec![(*table, gt)]
            }
            Op::Reshape(a) => vec![(*a, g.to_vec())],
            Op::Conv1d { seq, filters, bias } => {
                let ss = self.shape(*seq);
                let sf = self.shape(*filters);
                let (batch, m, d) = (ss[0], ss[1], ss[2]);
                let (nf, h) = (sf[0], sf[1]);
                let l = m - h + 1;
                let win = h * d;
                let xs = val(*seq);
                let ws = val(*filters);
                let mut gx = vec![0.0; xs.len()];
                let mut gw = vec![0.0; ws.len()];
                let mut gb = vec![0.0; nf];
                for b in 0..batch {
                    for j in 0..l {
                        let grow = &g[(b * l + j) * nf..(b * l + j + 1) * nf];
                        let base = b * m * d + j * d;
                        for (f, &gv) in grow.iter().enumerate() {
                            if gv == 0.0 {
                                continue;
                            }
                            gb[f] += gv;
                            let wrow = &ws[f * win..(f + 1) * win];
                            let window = &xs[base..base + win];
                            let gwrow = &mut gw[f * win..(f + 1) * win];
                            for k in 0..win {
                                gwrow[k] += gv * window[k];
                            }
                            let gxw = &mut gx[base..base + win];
                            for k in 0..win {
                                gxw[k] += gv * wrow[k];
                            }
                        }
                    }
                }
                vec![(*seq, gx), (*filters, gw), (*bias, gb)]
            }
            Op::MaxOverTime { input, argmax } => {
                let s = self.shape(*input);
                let (l, nf) = (s[1], s[2]);
                let mut ga = vec![0.0; self.nodes[input.0].value.len()];
                for (cell, (&j, &gv)) in argmax.iter().zip(g).enumerate() {
                    let (b, f) = (cell / nf, cell % nf);
                    ga[(b * l + j) * nf + f] += gv;
                }
                vec![(*input, ga)]
            }
            Op::PickNll {
                input,
                targets,
                weights,
            } => {
                let cols = self.nodes[input.0].value.cols();
                let mut ga = vec![0.0; self.nodes[input.0].value.len()];
                for (n, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    if w != 0.0 {
                        ga[n * cols + t] = -w * g[0];
                    }
                }
                vec![(*input, ga)]
            }
            Op::ModifiedSce {
                logits,
                labels,
                weights,
            } => {
                let src = &self.nodes[logits.0].value;
                let (rows, k) = (src.rows(), src.cols());
                let scale = g[0] / rows as f64;
                let mut ga = vec![0.0; src.len()];
                for i in 0..rows {
                    let s = &src.data()[i * k..(i + 1) * k];
                    let y = &labels[i * k..(i + 1) * k];
                    let pos: f64 = y.iter().sum();
                    let neg: f64 = y.iter().map(|v| 1.0 - v).sum();
                    let pos_d = pos + SOFT_RATIO_EPS;
                    let neg_d = neg + SOFT_RATIO_EPS;
                    for j in 0..k {
                        let p = tensor::sigmoid(s[j]);
                        let dp = p * (1.0 - p);
                        let d = weights[0] * (p - y[j]) - weights[1] * y[j] * dp / pos_d
                            + weights[2] * (1.0 - y[j]) * dp / neg_d;
                        ga[i * k + j] = d * scale;
                    }
                }
                vec![(*logits, ga)]
            }
            Op::BceWithLogits { logits, labels } => {
                let src = &self.nodes[logits.0].value;
                let scale = g[0] / src.rows() as f64;
                let ga = src
                    .data()
                    .iter()
                    .zip(labels)
                    .map(|(&s, &y)| (tensor::sigmoid(s) - y) * scale)
                    .collect();
                vec![(*logits, ga)]
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap());
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let s = g.sum(x);
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).data(), &[2.0, 2.0]);
        g.zero_grad();
        assert_eq!(g.grad(x).data(), &[0.0, 0.0]);
    }

    #[test]
    fn disconnected_leaf_has_zero_grad() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let y = g.param(Tensor::vector(vec![5.0, 6.0, 7.0]).unwrap());
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(y).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let y = g.relu(x);
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn conv_hand_example() {
        let mut g = Graph::new();
        let seq = g.constant(Tensor::new(vec![1, 4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let f = g.constant(Tensor::new(vec![1, 2, 1], vec![1.0, 1.0]).unwrap());
        let b = g.constant(Tensor::vector(vec![0.0]).unwrap());
        let c = g.conv1d_valid(seq, f, b).unwrap();
        assert_eq!(g.value(c).data(), &[3.0, 5.0, 7.0]);

        let zf = g.constant(Tensor::zeros(&[1, 2, 1]));
        let z = g.conv1d_valid(seq, zf, b).unwrap();
        assert_eq!(g.value(z).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn conv_window_error() {
        let mut g = Graph::new();
        let seq = g.constant(Tensor::zeros(&[1, 2, 3]));
        let f = g.constant(Tensor::zeros(&[1, 3, 3]));
        let b = g.constant(Tensor::zeros(&[1]));
        assert!(matches!(
            g.conv1d_valid(seq, f, b),
            Err(Error::Window { width: 3, len: 2 })
        ));
    }

    #[test]
    fn max_over_time_routes_to_argmax() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![1, 3, 1], vec![1.0, 9.0, 2.0]).unwrap());
        let m = g.max_over_time(x).unwrap();
        let s = g.sum(m);
        g.backward(s).unwrap();
        assert_eq!(g.value(m).data(), &[9.0]);
        assert_eq!(g.grad(x).data(), &[0.0, 1.0, 0.0]);

        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![1, 3, 1], vec![4.0, 4.0, 1.0]).unwrap());
        let m = g.max_over_time(x).unwrap();
        let s = g.sum(m);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn activations_at_reference_points() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0, -2.5]).unwrap());
        let s = g.sigmoid(x);
        let t = g.tanh(x);
        let r = g.relu(x);
        assert_eq!(g.value(s).data()[0], 0.5);
        assert_eq!(g.value(t).data()[0], 0.0);
        assert_eq!(g.value(r).data()[1], 0.0);
        let z = g.constant(Tensor::vector(vec![0.0; 3]).unwrap());
        let sm = g.softmax(z);
        for &p in g.value(sm).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn inference_graph_records_nothing_but_matches_values() {
        let build = |g: &mut Graph| {
            let a = g.param(Tensor::matrix(2, 2, vec![0.3, -1.2, 0.7, 2.0]).unwrap());
            let b = g.param(Tensor::matrix(2, 1, vec![0.5, -0.25]).unwrap());
            let p = g.matmul(a, b).unwrap();
            let s = g.sigmoid(p);
            let l = g.sum(s);
            g.value(l).item().unwrap()
        };
        let mut rec = Graph::new();
        let mut inf = Graph::inference();
        assert_eq!(build(&mut rec).to_bits(), build(&mut inf).to_bits());
        assert!(!inf.is_recording());
    }

    #[test]
    fn op_kind_parses_from_name() {
        for k in OpKind::ALL {
            assert_eq!(k.name().parse::<OpKind>().unwrap(), k);
        }
        assert!("nope".parse::<OpKind>().is_err());
    }

    #[test]
    fn modified_sce_reduces_to_bce_bitwise() {
        let logits = Tensor::matrix(2, 3, vec![0.3, -1.1, 2.5, -0.4, 0.0, 1.7]).unwrap();
        let labels = [1.0, 0.0, 1.0, 0.0, 0.0, 1.0];
        let mut g1 = Graph::new();
        let s1 = g1.param(logits.clone());
        let l1 = g1.modified_sce(s1, &labels, [1.0, 0.0, 0.0]).unwrap();
        g1.backward(l1).unwrap();
        let mut g2 = Graph::new();
        let s2 = g2.param(logits);
        let l2 = g2.bce_with_logits(s2, &labels).unwrap();
        g2.backward(l2).unwrap();
        assert_eq!(
            g1.value(l1).item().unwrap().to_bits(),
            g2.value(l2).item().unwrap().to_bits()
        );
        let (a, b) = (g1.grad(s1), g2.grad(s2));
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}
