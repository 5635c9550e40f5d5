//! Tape-based reverse-mode differentiation.
//!
//! Ops are recorded on an arena as they are evaluated (forward is eager), so
//! node values are available immediately, e.g. for data-dependent neighbor
//! lookups whose indices are treated as constants. `backward` walks the tape
//! in reverse and accumulates gradients additively: calling it twice without
//! `zero_grads` doubles every gradient, by contract.
//!
//! Piecewise ops (relu, max pooling, hinge, chamfer, row normalization)
//! report how close their inputs sit to a switching boundary through
//! `min_kink_margin`; the gradient checker uses this to mask coordinates
//! where central differences straddle a kink.

use super::matmul::{mm_nn, mm_nt, mm_tn};
use super::tensor::{AutodiffError, Tensor};

/// Logit value treated as "masked out" of a softmax row; exp of it underflows
/// to exactly 0 under any max shift that keeps one finite entry.
pub const NEG_MASK: f64 = -1e30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddBcastRow(NodeId, NodeId),
    AddBcastCol(NodeId, NodeId),
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    Relu(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    MaxAxis0(NodeId, Vec<usize>),
    MeanAxis0(NodeId),
    MaxPoolRows {
        input: NodeId,
        group: usize,
        argmax: Vec<usize>,
    },
    ConcatRows(Vec<NodeId>),
    ConcatCols(NodeId, NodeId),
    GatherRows(NodeId, Vec<usize>),
    L2NormalizeRows(NodeId, Vec<f64>),
    SoftmaxXent {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    HingeSq {
        scores: NodeId,
        labels: Vec<f64>,
    },
    Chamfer {
        pred: NodeId,
        target: Tensor,
        nn_pred_to_target: Vec<usize>,
        nn_target_to_pred: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    needs_grad: bool,
    op: Op,
}

pub struct Graph {
    nodes: Vec<Node>,
    min_kink_margin: f64,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            min_kink_margin: f64::INFINITY,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Smallest distance any piecewise op has come to a switching boundary
    /// since graph construction started.
    pub fn min_kink_margin(&self) -> f64 {
        self.min_kink_margin
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Accumulated gradient; zeros if backward has not reached this node.
    pub fn grad(&self, id: NodeId) -> Tensor {
        let node = &self.nodes[id.0];
        node.grad
            .clone()
            .unwrap_or_else(|| Tensor::zeros(node.value.rows(), node.value.cols()))
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, needs_grad: bool, op: Op) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn note_margin(&mut self, m: f64) {
        if m < self.min_kink_margin {
            self.min_kink_margin = m;
        }
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    fn same_shape(
        &self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
    ) -> Result<(usize, usize), AutodiffError> {
        let (la, lb) = (self.value(a).shape(), self.value(b).shape());
        if la != lb {
            return Err(AutodiffError::ShapeMismatch {
                op,
                left: la,
                right: lb,
            });
        }
        Ok(la)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let (r, c) = self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_vec(r, c, data)?, needs, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let (r, c) = self.same_shape("sub", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_vec(r, c, data)?, needs, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let (r, c) = self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_vec(r, c, data)?, needs, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId, AutodiffError> {
        let (r, c) = self.value(a).shape();
        let data = self.value(a).data().iter().map(|x| x * factor).collect();
        let needs = self.needs(a);
        Ok(self.push(Tensor::from_vec(r, c, data)?, needs, Op::Scale(a, factor)))
    }

    /// `a` (N×M) plus a row vector `v` (1×M) added to every row.
    pub fn add_bcast_row(&mut self, a: NodeId, v: NodeId) -> Result<NodeId, AutodiffError> {
        let (r, c) = self.value(a).shape();
        let vs = self.value(v).shape();
        if vs != (1, c) {
            return Err(AutodiffError::ShapeMismatch {
                op: "add_bcast_row",
                left: (r, c),
                right: vs,
            });
        }
        let mut data = self.value(a).data().to_vec();
        let row = self.value(v).data().to_vec();
        for chunk in data.chunks_exact_mut(c) {
            for (x, y) in chunk.iter_mut().zip(&row) {
                *x += y;
            }
        }
        let needs = self.needs(a) || self.needs(v);
        Ok(self.push(Tensor::from_vec(r, c, data)?, needs, Op::AddBcastRow(a, v)))
    }

    /// `a` (N×M) plus a column vector `v` (N×1) added to every column.
    pub fn add_bcast_col(&mut self, a: NodeId, v: NodeId) -> Result<NodeId, AutodiffError> {
        let (r, c) = self.value(a).shape();
        let vs = self.value(v).shape();
        if vs != (r, 1) {
            return Err(AutodiffError::ShapeMismatch {
                op: "add_bcast_col",
                left: (r, c),
                right: vs,
            });
        }
        let mut data = self.value(a).data().to_vec();
        let col = self.value(v).data().to_vec();
        for (i, chunk) in data.chunks_exact_mut(c).enumerate() {
            for x in chunk.iter_mut() {
                *x += col[i];
            }
        }
        let needs = self.needs(a) || self.needs(v);
        Ok(self.push(Tensor::from_vec(r, c, data)?, needs, Op::AddBcastCol(a, v)))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let (ar, ac) = self.value(a).shape();
        let (br, bc) = self.value(b).shape();
        if ac != br {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                left: (ar, ac),
                right: (br, bc),
            });
        }
        let data = mm_nn(self.value(a).data(), ar, ac, self.value(b).data(), bc);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_vec(ar, bc, data)?, needs, Op::Matmul(a, b)))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let (r, c) = self.value(a).shape();
        let src = self.value(a).data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let needs = self.needs(a);
        Ok(self.push(Tensor::from_vec(c, r, data)?, needs, Op::Transpose(a)))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let (r, c) = self.value(a).shape();
        let mut margin = f64::INFINITY;
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|&x| {
                margin = margin.min(x.abs());
                x.max(0.0)
            })
            .collect();
        self.note_margin(margin);
        let needs = self.needs(a);
        Ok(self.push(Tensor::from_vec(r, c, data)?, needs, Op::Relu(a)))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let (r, c) = self.value(a).shape();
        let data = self.value(a).data().iter().map(|x| x.exp()).collect();
        let needs = self.needs(a);
        Ok(self.push(Tensor::from_vec(r, c, data)?, needs, Op::Exp(a)))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let (r, c) = self.value(a).shape();
        let mut margin = f64::INFINITY;
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|&x| {
                margin = margin.min(x);
                x.ln()
            })
            .collect();
        self.note_margin(margin);
        let needs = self.needs(a);
        Ok(self.push(Tensor::from_vec(r, c, data)?, needs, Op::Log(a)))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let total: f64 = self.value(a).data().iter().sum();
        let needs = self.needs(a);
        Ok(self.push(Tensor::scalar(total), needs, Op::Sum(a)))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(AutodiffError::InvalidArgument("mean of empty tensor".into()));
        }
        let total: f64 = self.value(a).data().iter().sum();
        let needs = self.needs(a);
        Ok(self.push(Tensor::scalar(total / n as f64), needs, Op::Mean(a)))
    }

    /// Column-wise max over all rows, 1×C output. Ties route the gradient to
    /// the lowest row index.
    pub fn max_axis0(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let (r, c) = self.value(a).shape();
        if r == 0 {
            return Err(AutodiffError::InvalidArgument("max_axis0 of empty tensor".into()));
        }
        let src = self.value(a).data();
        let mut out = vec![f64::NEG_INFINITY; c];
        let mut second = vec![f64::NEG_INFINITY; c];
        let mut argmax = vec![0usize; c];
        for i in 0..r {
            for j in 0..c {
                let v = src[i * c + j];
                if v > out[j] {
                    second[j] = out[j];
                    out[j] = v;
                    argmax[j] = i;
                } else if v > second[j] {
                    second[j] = v;
                }
            }
        }
        if r > 1 {
            let margin = out
                .iter()
                .zip(&second)
                .map(|(a, b)| a - b)
                .fold(f64::INFINITY, f64::min);
            self.note_margin(margin);
        }
        let needs = self.needs(a);
        Ok(self.push(Tensor::from_vec(1, c, out)?, needs, Op::MaxAxis0(a, argmax)))
    }

    pub fn mean_axis0(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let (r, c) = self.value(a).shape();
        if r == 0 {
            return Err(AutodiffError::InvalidArgument("mean_axis0 of empty tensor".into()));
        }
        let src = self.value(a).data();
        let mut out = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                out[j] += src[i * c + j];
            }
        }
        for v in &mut out {
            *v /= r as f64;
        }
        let needs = self.needs(a);
        Ok(self.push(Tensor::from_vec(1, c, out)?, needs, Op::MeanAxis0(a)))
    }

    /// Max over fixed-size row groups: (G·k)×C input pools to G×C, column by
    /// column within each consecutive block of `group` rows.
    pub fn max_pool_rows(&mut self, a: NodeId, group: usize) -> Result<NodeId, AutodiffError> {
        let (r, c) = self.value(a).shape();
        if group == 0 || r % group != 0 {
            return Err(AutodiffError::InvalidArgument(format!(
                "max_pool_rows: group {group} does not divide rows {r}"
            )));
        }
        let out_rows = r / group;
        let src = self.value(a).data();
        let mut out = vec![f64::NEG_INFINITY; out_rows * c];
        let mut second = vec![f64::NEG_INFINITY; out_rows * c];
        let mut argmax = vec![0usize; out_rows * c];
        for g in 0..out_rows {
            for i in 0..group {
                let row = g * group + i;
                for j in 0..c {
                    let v = src[row * c + j];
                    let o = g * c + j;
                    if v > out[o] {
                        second[o] = out[o];
                        out[o] = v;
                        argmax[o] = row;
                    } else if v > second[o] {
                        second[o] = v;
                    }
                }
            }
        }
        if group > 1 {
            let margin = out
                .iter()
                .zip(&second)
                .map(|(a, b)| a - b)
                .fold(f64::INFINITY, f64::min);
            self.note_margin(margin);
        }
        let needs = self.needs(a);
        Ok(self.push(
            Tensor::from_vec(out_rows, c, out)?,
            needs,
            Op::MaxPoolRows {
                input: a,
                group,
                argmax,
            },
        ))
    }

    /// Vertical concatenation of any number of nodes with equal column count.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId, AutodiffError> {
        if parts.is_empty() {
            return Err(AutodiffError::InvalidArgument("concat_rows of nothing".into()));
        }
        let c = self.value(parts[0]).cols();
        let mut rows = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.1 != c {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat_rows",
                    left: (rows, c),
                    right: s,
                });
            }
            rows += s.0;
        }
        let mut data = Vec::with_capacity(rows * c);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor::from_vec(rows, c, data)?,
            needs,
            Op::ConcatRows(parts.to_vec()),
        ))
    }

    /// Horizontal concatenation of two nodes with equal row count.
    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let (ra, ca) = self.value(a).shape();
        let (rb, cb) = self.value(b).shape();
        if ra != rb {
            return Err(AutodiffError::ShapeMismatch {
                op: "concat_cols",
                left: (ra, ca),
                right: (rb, cb),
            });
        }
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            data.extend_from_slice(self.value(a).row(i));
            data.extend_from_slice(self.value(b).row(i));
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::from_vec(ra, ca + cb, data)?,
            needs,
            Op::ConcatCols(a, b),
        ))
    }

    /// Row gather: output row i is input row `indices[i]`. Backward
    /// scatter-adds, so repeated indices accumulate.
    pub fn gather_rows(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId, AutodiffError> {
        let (r, c) = self.value(a).shape();
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return Err(AutodiffError::InvalidArgument(format!(
                "gather_rows: index {bad} out of range for {r} rows"
            )));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            data.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let needs = self.needs(a);
        Ok(self.push(
            Tensor::from_vec(indices.len(), c, data)?,
            needs,
            Op::GatherRows(a, indices.to_vec()),
        ))
    }

    /// Row-wise L2 normalization; rows with norm below 1e-12 are scaled by
    /// 1/1e-12 instead of blowing up (and flagged as a kink).
    pub fn l2_normalize_rows(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let (r, c) = self.value(a).shape();
        let src = self.value(a).data();
        let mut norms = Vec::with_capacity(r);
        let mut data = vec![0.0; r * c];
        let mut margin = f64::INFINITY;
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            margin = margin.min(norm);
            let clamped = norm.max(1e-12);
            norms.push(clamped);
            for j in 0..c {
                data[i * c + j] = row[j] / clamped;
            }
        }
        self.note_margin(margin);
        let needs = self.needs(a);
        Ok(self.push(
            Tensor::from_vec(r, c, data)?,
            needs,
            Op::L2NormalizeRows(a, norms),
        ))
    }

    /// Mean cross-entropy of row-wise softmax against integer targets,
    /// computed with a max shift. Entries at or below [`NEG_MASK`] contribute
    /// exactly zero probability, which implements "excluded from the
    /// denominator".
    pub fn softmax_xent(
        &mut self,
        logits: NodeId,
        targets: &[usize],
    ) -> Result<NodeId, AutodiffError> {
        let (r, c) = self.value(logits).shape();
        if targets.len() != r {
            return Err(AutodiffError::InvalidArgument(format!(
                "softmax_xent: {} targets for {} rows",
                targets.len(),
                r
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(AutodiffError::InvalidArgument(format!(
                "softmax_xent: target {bad} out of range for {c} columns"
            )));
        }
        let src = self.value(logits).data();
        let mut probs = vec![0.0; r * c];
        let mut total = 0.0;
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut denom = 0.0;
            for j in 0..c {
                let e = (row[j] - m).exp();
                probs[i * c + j] = e;
                denom += e;
            }
            for j in 0..c {
                probs[i * c + j] /= denom;
            }
            // loss_i = log(denom) + m - logit_target
            total += denom.ln() + m - row[targets[i]];
        }
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(total / r as f64),
            needs,
            Op::SoftmaxXent {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Mean squared hinge loss over a column of scores with ±1 labels:
    /// `(1/N) Σ max(0, 1 − y·s)²`.
    pub fn hinge_sq(&mut self, scores: NodeId, labels: &[f64]) -> Result<NodeId, AutodiffError> {
        let (r, c) = self.value(scores).shape();
        if c != 1 || labels.len() != r {
            return Err(AutodiffError::ShapeMismatch {
                op: "hinge_sq",
                left: (r, c),
                right: (labels.len(), 1),
            });
        }
        let src = self.value(scores).data();
        let mut total = 0.0;
        let mut margin = f64::INFINITY;
        for i in 0..r {
            let m = 1.0 - labels[i] * src[i];
            margin = margin.min(m.abs());
            let h = m.max(0.0);
            total += h * h;
        }
        self.note_margin(margin);
        let needs = self.needs(scores);
        Ok(self.push(
            Tensor::scalar(total / r as f64),
            needs,
            Op::HingeSq {
                scores,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Squared-L2 Chamfer distance between a predicted n×3 node and a fixed
    /// target m×3 tensor; gradient flows into the prediction only. Nearest
    /// neighbors are resolved at forward time (ties to the lowest index) and
    /// held fixed for the backward pass.
    pub fn chamfer(&mut self, pred: NodeId, target: &Tensor) -> Result<NodeId, AutodiffError> {
        let (pr, pc) = self.value(pred).shape();
        if pc != 3 || target.cols() != 3 || pr == 0 || target.rows() == 0 {
            return Err(AutodiffError::ShapeMismatch {
                op: "chamfer",
                left: (pr, pc),
                right: target.shape(),
            });
        }
        let p = self.value(pred).data();
        let q = target.data();
        let (np, nq) = (pr, target.rows());
        let mut total = 0.0;
        let mut margin = f64::INFINITY;
        let mut nn_pt = Vec::with_capacity(np);
        for i in 0..np {
            let (best, gap) = nearest(&p[i * 3..i * 3 + 3], q, nq);
            margin = margin.min(gap);
            total += dist_sq(&p[i * 3..i * 3 + 3], &q[best * 3..best * 3 + 3]) / np as f64;
            nn_pt.push(best);
        }
        let mut nn_tp = Vec::with_capacity(nq);
        for j in 0..nq {
            let (best, gap) = nearest(&q[j * 3..j * 3 + 3], p, np);
            margin = margin.min(gap);
            total += dist_sq(&q[j * 3..j * 3 + 3], &p[best * 3..best * 3 + 3]) / nq as f64;
            nn_tp.push(best);
        }
        self.note_margin(margin);
        let needs = self.needs(pred);
        Ok(self.push(
            Tensor::scalar(total),
            needs,
            Op::Chamfer {
                pred,
                target: target.clone(),
                nn_pred_to_target: nn_pt,
                nn_target_to_pred: nn_tp,
            },
        ))
    }

    /// Accumulates gradients of a scalar loss into every `requires_grad`
    /// leaf reachable from it.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), AutodiffError> {
        if self.value(loss).shape() != (1, 1) {
            return Err(AutodiffError::InvalidArgument(format!(
                "backward: loss must be 1x1, got {:?}",
                self.value(loss).shape()
            )));
        }
        self.accumulate(loss, None);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad || self.nodes[idx].grad.is_none() {
                continue;
            }
            self.propagate(idx)?;
        }
        Ok(())
    }

    /// Adds `delta` (or 1.0 for the loss seed) into a node's gradient.
    fn accumulate(&mut self, id: NodeId, delta: Option<&[f64]>) {
        let node = &mut self.nodes[id.0];
        let grad = node
            .grad
            .get_or_insert_with(|| Tensor::zeros(node.value.rows(), node.value.cols()));
        match delta {
            None => grad.data_mut()[0] += 1.0,
            Some(d) => {
                for (g, x) in grad.data_mut().iter_mut().zip(d) {
                    *g += x;
                }
            }
        }
    }

    fn propagate(&mut self, idx: usize) -> Result<(), AutodiffError> {
        let out_grad = self.nodes[idx].grad.as_ref().unwrap().clone();
        let g = out_grad.data();
        match &self.nodes[idx].op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                if self.needs(a) {
                    self.accumulate(a, Some(g));
                }
                if self.needs(b) {
                    self.accumulate(b, Some(g));
                }
            }
            &Op::Sub(a, b) => {
                if self.needs(a) {
                    self.accumulate(a, Some(g));
                }
                if self.needs(b) {
                    let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                    self.accumulate(b, Some(&neg));
                }
            }
            &Op::Mul(a, b) => {
                if self.needs(a) {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(self.value(b).data())
                        .map(|(x, y)| x * y)
                        .collect();
                    self.accumulate(a, Some(&da));
                }
                if self.needs(b) {
                    let db: Vec<f64> = g
                        .iter()
                        .zip(self.value(a).data())
                        .map(|(x, y)| x * y)
                        .collect();
                    self.accumulate(b, Some(&db));
                }
            }
            &Op::Scale(a, factor) => {
                if self.needs(a) {
                    let da: Vec<f64> = g.iter().map(|x| x * factor).collect();
                    self.accumulate(a, Some(&da));
                }
            }
            &Op::AddBcastRow(a, v) => {
                let c = self.value(a).cols();
                if self.needs(a) {
                    self.accumulate(a, Some(g));
                }
                if self.needs(v) {
                    let mut dv = vec![0.0; c];
                    for chunk in g.chunks_exact(c) {
                        for (s, x) in dv.iter_mut().zip(chunk) {
                            *s += x;
                        }
                    }
                    self.accumulate(v, Some(&dv));
                }
            }
            &Op::AddBcastCol(a, v) => {
                let (r, c) = self.value(a).shape();
                if self.needs(a) {
                    self.accumulate(a, Some(g));
                }
                if self.needs(v) {
                    let mut dv = vec![0.0; r];
                    for (i, chunk) in g.chunks_exact(c).enumerate() {
                        dv[i] = chunk.iter().sum();
                    }
                    self.accumulate(v, Some(&dv));
                }
            }
            &Op::Matmul(a, b) => {
                let (ar, ac) = self.value(a).shape();
                let bc = self.value(b).cols();
                if self.needs(a) {
                    // dA = dC · Bᵀ
                    let da = mm_nt(g, ar, bc, self.value(b).data(), ac);
                    self.accumulate(a, Some(&da));
                }
                if self.needs(b) {
                    // dB = Aᵀ · dC
                    let db = mm_tn(self.value(a).data(), ar, ac, g, bc);
                    self.accumulate(b, Some(&db));
                }
            }
            &Op::Transpose(a) => {
                if self.needs(a) {
                    let (r, c) = self.value(a).shape();
                    let mut da = vec![0.0; r * c];
                    for i in 0..c {
                        for j in 0..r {
                            da[j * c + i] = g[i * r + j];
                        }
                    }
                    self.accumulate(a, Some(&da));
                }
            }
            &Op::Relu(a) => {
                if self.needs(a) {
                    let da: Vec<f64> = self
                        .value(a)
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(&x, &d)| if x > 0.0 { d } else { 0.0 })
                        .collect();
                    self.accumulate(a, Some(&da));
                }
            }
            &Op::Exp(a) => {
                if self.needs(a) {
                    let da: Vec<f64> = self.nodes[idx]
                        .value
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(y, d)| y * d)
                        .collect();
                    self.accumulate(a, Some(&da));
                }
            }
            &Op::Log(a) => {
                if self.needs(a) {
                    let da: Vec<f64> = self
                        .value(a)
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(x, d)| d / x)
                        .collect();
                    self.accumulate(a, Some(&da));
                }
            }
            &Op::Sum(a) => {
                if self.needs(a) {
                    let da = vec![g[0]; self.value(a).len()];
                    self.accumulate(a, Some(&da));
                }
            }
            &Op::Mean(a) => {
                if self.needs(a) {
                    let n = self.value(a).len();
                    let da = vec![g[0] / n as f64; n];
                    self.accumulate(a, Some(&da));
                }
            }
            Op::MaxAxis0(a, argmax) => {
                let (a, argmax) = (*a, argmax.clone());
                if self.needs(a) {
                    let (r, c) = self.value(a).shape();
                    let mut da = vec![0.0; r * c];
                    for j in 0..c {
                        da[argmax[j] * c + j] = g[j];
                    }
                    self.accumulate(a, Some(&da));
                }
            }
            &Op::MeanAxis0(a) => {
                if self.needs(a) {
                    let (r, c) = self.value(a).shape();
                    let mut da = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            da[i * c + j] = g[j] / r as f64;
                        }
                    }
                    self.accumulate(a, Some(&da));
                }
            }
            Op::MaxPoolRows { input, argmax, .. } => {
                let (input, argmax) = (*input, argmax.clone());
                if self.needs(input) {
                    let (r, c) = self.value(input).shape();
                    let mut da = vec![0.0; r * c];
                    for (o, &src_row) in argmax.iter().enumerate() {
                        let j = o % c;
                        da[src_row * c + j] += g[o];
                    }
                    self.accumulate(input, Some(&da));
                }
            }
            Op::ConcatRows(parts) => {
                let parts = parts.clone();
                let c = self.nodes[idx].value.cols();
                let mut offset = 0;
                for p in parts {
                    let rows = self.value(p).rows();
                    if self.needs(p) {
                        let slice = g[offset * c..(offset + rows) * c].to_vec();
                        self.accumulate(p, Some(&slice));
                    }
                    offset += rows;
                }
            }
            &Op::ConcatCols(a, b) => {
                let (r, ca) = self.value(a).shape();
                let cb = self.value(b).cols();
                let c = ca + cb;
                if self.needs(a) {
                    let mut da = vec![0.0; r * ca];
                    for i in 0..r {
                        da[i * ca..(i + 1) * ca].copy_from_slice(&g[i * c..i * c + ca]);
                    }
                    self.accumulate(a, Some(&da));
                }
                if self.needs(b) {
                    let mut db = vec![0.0; r * cb];
                    for i in 0..r {
                        db[i * cb..(i + 1) * cb].copy_from_slice(&g[i * c + ca..(i + 1) * c]);
                    }
                    self.accumulate(b, Some(&db));
                }
            }
            Op::GatherRows(a, indices) => {
                let (a, indices) = (*a, indices.clone());
                if self.needs(a) {
                    let (r, c) = self.value(a).shape();
                    let mut da = vec![0.0; r * c];
                    for (out_row, &src_row) in indices.iter().enumerate() {
                        for j in 0..c {
                            da[src_row * c + j] += g[out_row * c + j];
                        }
                    }
                    self.accumulate(a, Some(&da));
                }
            }
            Op::L2NormalizeRows(a, norms) => {
                let (a, norms) = (*a, norms.clone());
                if self.needs(a) {
                    let (r, c) = self.value(a).shape();
                    let y = self.nodes[idx].value.data();
                    let mut da = vec![0.0; r * c];
                    for i in 0..r {
                        let yr = &y[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(u, v)| u * v).sum();
                        for j in 0..c {
                            da[i * c + j] = (gr[j] - yr[j] * dot) / norms[i];
                        }
                    }
                    self.accumulate(a, Some(&da));
                }
            }
            Op::SoftmaxXent {
                logits,
                targets,
                probs,
            } => {
                let (logits, targets, probs) = (*logits, targets.clone(), probs.clone());
                if self.needs(logits) {
                    let (r, c) = self.value(logits).shape();
                    let scale = g[0] / r as f64;
                    let mut da = probs;
                    for i in 0..r {
                        da[i * c + targets[i]] -= 1.0;
                    }
                    for v in &mut da {
                        *v *= scale;
                    }
                    self.accumulate(logits, Some(&da));
                }
            }
            Op::HingeSq { scores, labels } => {
                let (scores, labels) = (*scores, labels.clone());
                if self.needs(scores) {
                    let n = labels.len();
                    let s = self.value(scores).data();
                    let scale = g[0] / n as f64;
                    let da: Vec<f64> = (0..n)
                        .map(|i| {
                            let m = 1.0 - labels[i] * s[i];
                            if m > 0.0 {
                                -2.0 * labels[i] * m * scale
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    self.accumulate(scores, Some(&da));
                }
            }
            Op::Chamfer {
                pred,
                target,
                nn_pred_to_target,
                nn_target_to_pred,
            } => {
                let pred = *pred;
                let target = target.clone();
                let nn_pt = nn_pred_to_target.clone();
                let nn_tp = nn_target_to_pred.clone();
                if self.needs(pred) {
                    let np = self.value(pred).rows();
                    let nq = target.rows();
                    let p = self.value(pred).data();
                    let q = target.data();
                    let mut da = vec![0.0; np * 3];
                    for (i, &j) in nn_pt.iter().enumerate() {
                        for c in 0..3 {
                            da[i * 3 + c] += 2.0 * (p[i * 3 + c] - q[j * 3 + c]) / np as f64;
                        }
                    }
                    for (j, &i) in nn_tp.iter().enumerate() {
                        for c in 0..3 {
                            da[i * 3 + c] += 2.0 * (p[i * 3 + c] - q[j * 3 + c]) / nq as f64;
                        }
                    }
                    for v in &mut da {
                        *v *= g[0];
                    }
                    self.accumulate(pred, Some(&da));
                }
            }
        }
        Ok(())
    }
}

fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Index of the nearest point in a flat xyz buffer plus the gap between the
/// best and second-best squared distances (infinite when there is only one
/// candidate).
fn nearest(p: &[f64], pts: &[f64], n: usize) -> (usize, f64) {
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    let mut second_d = f64::INFINITY;
    for i in 0..n {
        let d = dist_sq(p, &pts[i * 3..i * 3 + 3]);
        if d < best_d {
            second_d = best_d;
            best_d = d;
            best = i;
        } else if d < second_d {
            second_d = d;
        }
    }
    (best, second_d - best_d)
}
