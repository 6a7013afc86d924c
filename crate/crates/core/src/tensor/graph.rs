//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Graph`] is a tape: every operation appends a node, so node indices are
//! already a topological order and the backward pass is a single reverse scan
//! that visits each node exactly once. Leaves carry a `requires_grad` flag;
//! gradients are only propagated through subgraphs that reach such a leaf.

use crate::error::{Error, Result};

use super::matrix::Matrix;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Hadamard(NodeId, NodeId),
    Div(NodeId, NodeId),
    Minimum(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Transpose(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Clip(NodeId, f64, f64),
    Silu(NodeId),
    SoftmaxCols(NodeId),
    LogSoftmaxCols(NodeId),
    LayerNormCols {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    },
    ColumnNorms(NodeId),
    BroadcastCol(NodeId),
    BroadcastRow(NodeId),
    SliceRows(NodeId, usize, usize),
    SliceCols(NodeId, usize, usize),
    ConcatRows(Vec<NodeId>),
    Sum(NodeId),
    Mean(NodeId),
    PickPerCol(NodeId, Vec<usize>),
    EmbedCols(NodeId, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    grad: Option<Matrix>,
    op: Op,
    requires_grad: bool,
}

/// Autodiff tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    spent: bool,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> NodeId {
        debug_assert!(!self.spent, "graph already consumed by backward");
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Trainable leaf.
    pub fn leaf(&mut self, value: Matrix, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    /// Gradient accumulated at `id`, if backward reached it.
    pub fn grad(&self, id: NodeId) -> Option<&Matrix> {
        self.nodes[id.0].grad.as_ref()
    }

    /// Gradient at `id`, zeros if backward never touched it.
    pub fn grad_or_zeros(&self, id: NodeId) -> Matrix {
        let n = &self.nodes[id.0];
        n.grad.clone().unwrap_or_else(|| Matrix::zeros(n.value.rows(), n.value.cols()))
    }

    /// Clear every gradient and allow the tape to be extended again.
    pub fn reset(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.spent = false;
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.nodes[a.0].value.matmul(&self.nodes[b.0].value)?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.nodes[a.0].value.add(&self.nodes[b.0].value)?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.nodes[a.0].value.sub(&self.nodes[b.0].value)?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.nodes[a.0].value.hadamard(&self.nodes[b.0].value)?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(value, Op::Hadamard(a, b), rg))
    }

    /// Elementwise quotient.
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.nodes[a.0].value.shape() != self.nodes[b.0].value.shape() {
            return Err(Error::Dimension {
                op: "div",
                lhs: self.nodes[a.0].value.shape(),
                rhs: self.nodes[b.0].value.shape(),
            });
        }
        let value = self.nodes[a.0]
            .value
            .zip_div(&self.nodes[b.0].value);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(value, Op::Div(a, b), rg))
    }

    /// Elementwise minimum; ties route the gradient to the first operand.
    pub fn minimum(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.nodes[a.0]
            .value
            .zip_min(&self.nodes[b.0].value)
            .ok_or(Error::Dimension {
                op: "minimum",
                lhs: self.nodes[a.0].value.shape(),
                rhs: self.nodes[b.0].value.shape(),
            })?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(value, Op::Minimum(a, b), rg))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let value = self.nodes[a.0].value.scale(s);
        let rg = self.requires(a);
        self.push(value, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.nodes[a.0].value.map(|v| v + c);
        let rg = self.requires(a);
        self.push(value, Op::AddScalar(a), rg)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.transpose();
        let rg = self.requires(a);
        self.push(value, Op::Transpose(a), rg)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.map(f64::exp);
        let rg = self.requires(a);
        self.push(value, Op::Exp(a), rg)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.map(f64::ln);
        let rg = self.requires(a);
        self.push(value, Op::Log(a), rg)
    }

    /// Clamp into `[lo, hi]`; gradient passes only through the interior
    /// (boundaries inclusive).
    pub fn clip(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let value = self.nodes[a.0].value.map(|v| v.clamp(lo, hi));
        let rg = self.requires(a);
        self.push(value, Op::Clip(a, lo, hi), rg)
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.map(|v| v * sigmoid(v));
        let rg = self.requires(a);
        self.push(value, Op::Silu(a), rg)
    }

    /// Softmax over the rows of each column.
    pub fn softmax_cols(&mut self, a: NodeId) -> NodeId {
        let value = softmax_cols_matrix(&self.nodes[a.0].value);
        let rg = self.requires(a);
        self.push(value, Op::SoftmaxCols(a), rg)
    }

    /// Log-softmax over the rows of each column (numerically stable).
    pub fn log_softmax_cols(&mut self, a: NodeId) -> NodeId {
        let x = &self.nodes[a.0].value;
        let (d, n) = x.shape();
        let mut out = Matrix::zeros(d, n);
        for j in 0..n {
            let mut max = f64::NEG_INFINITY;
            for i in 0..d {
                max = max.max(x.at(i, j));
            }
            let mut lse = 0.0;
            for i in 0..d {
                lse += (x.at(i, j) - max).exp();
            }
            let lse = max + lse.ln();
            for i in 0..d {
                out.set(i, j, x.at(i, j) - lse);
            }
        }
        let rg = self.requires(a);
        self.push(out, Op::LogSoftmaxCols(a), rg)
    }

    /// Per-column layer normalization with learned gain/bias (`d x 1` each):
    /// `y[:, j] = gain .* (x[:, j] - mean) / sqrt(var + eps) + bias`.
    pub fn layer_norm_cols(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let xv = &self.nodes[x.0].value;
        let (d, n) = xv.shape();
        let gv = &self.nodes[gain.0].value;
        let bv = &self.nodes[bias.0].value;
        if gv.shape() != (d, 1) || bv.shape() != (d, 1) {
            return Err(Error::Dimension {
                op: "layer_norm_cols",
                lhs: (d, n),
                rhs: gv.shape(),
            });
        }
        let mut out = Matrix::zeros(d, n);
        for j in 0..n {
            let (mu, sd) = col_moments(xv, j, eps);
            for i in 0..d {
                let xhat = (xv.at(i, j) - mu) / sd;
                out.set(i, j, gv.at(i, 0) * xhat + bv.at(i, 0));
            }
        }
        let rg = self.requires(x) || self.requires(gain) || self.requires(bias);
        Ok(self.push(out, Op::LayerNormCols { x, gain, bias, eps }, rg))
    }

    /// Row vector (`1 x cols`) of per-column Euclidean norms.
    pub fn column_norms(&mut self, a: NodeId) -> NodeId {
        let norms = self.nodes[a.0].value.column_norms();
        let value = Matrix::from_fn(1, norms.len(), |_, j| norms[j]);
        let rg = self.requires(a);
        self.push(value, Op::ColumnNorms(a), rg)
    }

    /// Repeat a `d x 1` column vector across `cols` columns.
    pub fn broadcast_col(&mut self, v: NodeId, cols: usize) -> Result<NodeId> {
        let vv = &self.nodes[v.0].value;
        if vv.cols() != 1 {
            return Err(Error::Contract(format!(
                "broadcast_col expects a column vector, got {:?}",
                vv.shape()
            )));
        }
        let value = Matrix::from_fn(vv.rows(), cols, |i, _| vv.at(i, 0));
        let rg = self.requires(v);
        Ok(self.push(value, Op::BroadcastCol(v), rg))
    }

    /// Repeat a `1 x n` row vector across `rows` rows.
    pub fn broadcast_row(&mut self, v: NodeId, rows: usize) -> Result<NodeId> {
        let vv = &self.nodes[v.0].value;
        if vv.rows() != 1 {
            return Err(Error::Contract(format!(
                "broadcast_row expects a row vector, got {:?}",
                vv.shape()
            )));
        }
        let value = Matrix::from_fn(rows, vv.cols(), |_, j| vv.at(0, j));
        let rg = self.requires(v);
        Ok(self.push(value, Op::BroadcastRow(v), rg))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let av = &self.nodes[a.0].value;
        if start + len > av.rows() {
            return Err(Error::Contract(format!(
                "slice_rows {start}..{} out of {} rows",
                start + len,
                av.rows()
            )));
        }
        let value = Matrix::from_fn(len, av.cols(), |i, j| av.at(start + i, j));
        let rg = self.requires(a);
        Ok(self.push(value, Op::SliceRows(a, start, len), rg))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let av = &self.nodes[a.0].value;
        if start + len > av.cols() {
            return Err(Error::Contract(format!(
                "slice_cols {start}..{} out of {} cols",
                start + len,
                av.cols()
            )));
        }
        let value = Matrix::from_fn(av.rows(), len, |i, j| av.at(i, start + j));
        let rg = self.requires(a);
        Ok(self.push(value, Op::SliceCols(a, start, len), rg))
    }

    /// Stack blocks vertically; all blocks must share a column count.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_rows of zero blocks".into()));
        }
        let cols = self.nodes[parts[0].0].value.cols();
        let mut rows = 0;
        for p in parts {
            let v = &self.nodes[p.0].value;
            if v.cols() != cols {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    lhs: (rows, cols),
                    rhs: v.shape(),
                });
            }
            rows += v.rows();
        }
        let mut value = Matrix::zeros(rows, cols);
        let mut at = 0;
        for p in parts {
            let v = &self.nodes[p.0].value;
            for i in 0..v.rows() {
                for j in 0..cols {
                    value.set(at + i, j, v.at(i, j));
                }
            }
            at += v.rows();
        }
        let rg = parts.iter().any(|p| self.requires(*p));
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Sum of all entries as a `1 x 1` matrix.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let value = Matrix::from_fn(1, 1, |_, _| self.nodes[a.0].value.sum());
        let rg = self.requires(a);
        self.push(value, Op::Sum(a), rg)
    }

    /// Mean of all entries as a `1 x 1` matrix.
    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let len = self.nodes[a.0].value.len().max(1) as f64;
        let value = Matrix::from_fn(1, 1, |_, _| self.nodes[a.0].value.sum() / len);
        let rg = self.requires(a);
        self.push(value, Op::Mean(a), rg)
    }

    /// Gather one row index per column: `out[0, j] = a[rows[j], j]`.
    pub fn pick_per_col(&mut self, a: NodeId, rows: Vec<usize>) -> Result<NodeId> {
        let av = &self.nodes[a.0].value;
        if rows.len() != av.cols() {
            return Err(Error::Contract(format!(
                "pick_per_col needs {} indices, got {}",
                av.cols(),
                rows.len()
            )));
        }
        if let Some(bad) = rows.iter().find(|&&r| r >= av.rows()) {
            return Err(Error::Domain(format!(
                "row index {bad} out of {} rows",
                av.rows()
            )));
        }
        let value = Matrix::from_fn(1, rows.len(), |_, j| av.at(rows[j], j));
        let rg = self.requires(a);
        Ok(self.push(value, Op::PickPerCol(a, rows), rg))
    }

    /// Gather columns of an embedding table: `out[:, j] = table[:, ids[j]]`.
    pub fn embed_cols(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let tv = &self.nodes[table.0].value;
        if let Some(bad) = ids.iter().find(|&&t| t >= tv.cols()) {
            return Err(Error::Domain(format!(
                "token id {bad} out of vocabulary {}",
                tv.cols()
            )));
        }
        let value = Matrix::from_fn(tv.rows(), ids.len(), |i, j| tv.at(i, ids[j]));
        let rg = self.requires(table);
        Ok(self.push(value, Op::EmbedCols(table, ids.to_vec()), rg))
    }

    fn accum(&mut self, id: NodeId, delta: Matrix) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let node = &mut self.nodes[id.0];
        match &mut node.grad {
            Some(g) => {
                *g = g.add(&delta).expect("gradient shape invariant");
            }
            None => node.grad = Some(delta),
        }
    }

    /// Reverse pass from a scalar (`1 x 1`) loss. Gradients accumulate on
    /// every `requires_grad` leaf; the tape is left in a consumed state until
    /// [`Graph::reset`].
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.spent {
            return Err(Error::Contract("backward on an already-consumed graph".into()));
        }
        if self.nodes[loss.0].value.shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.spent = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(Matrix::identity(1));

        for i in (0..self.nodes.len()).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let g = self.nodes[i].grad.clone().expect("checked above");
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let da = g.matmul(&self.nodes[b.0].value.transpose())?;
                    let db = self.nodes[a.0].value.transpose().matmul(&g)?;
                    self.accum(a, da);
                    self.accum(b, db);
                }
                Op::Add(a, b) => {
                    self.accum(a, g.clone());
                    self.accum(b, g);
                }
                Op::Sub(a, b) => {
                    self.accum(a, g.clone());
                    self.accum(b, g.scale(-1.0));
                }
                Op::Hadamard(a, b) => {
                    let da = g.hadamard(&self.nodes[b.0].value)?;
                    let db = g.hadamard(&self.nodes[a.0].value)?;
                    self.accum(a, da);
                    self.accum(b, db);
                }
                Op::Div(a, b) => {
                    let bv = &self.nodes[b.0].value;
                    let da = g.zip_div(bv);
                    let y = &self.nodes[i].value;
                    let db = g.hadamard(y)?.zip_div(bv).scale(-1.0);
                    self.accum(a, da);
                    self.accum(b, db);
                }
                Op::Minimum(a, b) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    let mask_a = Matrix::from_fn(av.rows(), av.cols(), |r, c| {
                        if av.at(r, c) <= bv.at(r, c) {
                            1.0
                        } else {
                            0.0
                        }
                    });
                    let da = g.hadamard(&mask_a)?;
                    let db = g.hadamard(&mask_a.map(|m| 1.0 - m))?;
                    self.accum(a, da);
                    self.accum(b, db);
                }
                Op::Scale(a, s) => self.accum(a, g.scale(s)),
                Op::AddScalar(a) => self.accum(a, g),
                Op::Transpose(a) => self.accum(a, g.transpose()),
                Op::Exp(a) => {
                    let da = g.hadamard(&self.nodes[i].value)?;
                    self.accum(a, da);
                }
                Op::Log(a) => {
                    let da = g.zip_div(&self.nodes[a.0].value);
                    self.accum(a, da);
                }
                Op::Clip(a, lo, hi) => {
                    let av = &self.nodes[a.0].value;
                    let da = Matrix::from_fn(av.rows(), av.cols(), |r, c| {
                        let v = av.at(r, c);
                        if v >= lo && v <= hi {
                            g.at(r, c)
                        } else {
                            0.0
                        }
                    });
                    self.accum(a, da);
                }
                Op::Silu(a) => {
                    let av = &self.nodes[a.0].value;
                    let da = Matrix::from_fn(av.rows(), av.cols(), |r, c| {
                        let x = av.at(r, c);
                        let s = sigmoid(x);
                        g.at(r, c) * s * (1.0 + x * (1.0 - s))
                    });
                    self.accum(a, da);
                }
                Op::SoftmaxCols(a) => {
                    let y = &self.nodes[i].value;
                    let (d, n) = y.shape();
                    let mut da = Matrix::zeros(d, n);
                    for j in 0..n {
                        let mut dot = 0.0;
                        for r in 0..d {
                            dot += g.at(r, j) * y.at(r, j);
                        }
                        for r in 0..d {
                            da.set(r, j, y.at(r, j) * (g.at(r, j) - dot));
                        }
                    }
                    self.accum(a, da);
                }
                Op::LogSoftmaxCols(a) => {
                    let y = &self.nodes[i].value;
                    let (d, n) = y.shape();
                    let mut da = Matrix::zeros(d, n);
                    for j in 0..n {
                        let mut gsum = 0.0;
                        for r in 0..d {
                            gsum += g.at(r, j);
                        }
                        for r in 0..d {
                            da.set(r, j, g.at(r, j) - y.at(r, j).exp() * gsum);
                        }
                    }
                    self.accum(a, da);
                }
                Op::LayerNormCols { x, gain, bias, eps } => {
                    let xv = &self.nodes[x.0].value;
                    let gv = &self.nodes[gain.0].value;
                    let (d, n) = xv.shape();
                    let mut dx = Matrix::zeros(d, n);
                    let mut dgain = Matrix::zeros(d, 1);
                    let mut dbias = Matrix::zeros(d, 1);
                    for j in 0..n {
                        let (mu, sd) = col_moments(xv, j, eps);
                        let xhat: Vec<f64> = (0..d).map(|r| (xv.at(r, j) - mu) / sd).collect();
                        let w: Vec<f64> = (0..d).map(|r| g.at(r, j) * gv.at(r, 0)).collect();
                        let w_mean = w.iter().sum::<f64>() / d as f64;
                        let wx_mean =
                            w.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for r in 0..d {
                            dx.set(r, j, (w[r] - w_mean - xhat[r] * wx_mean) / sd);
                            dgain.set(r, 0, dgain.at(r, 0) + g.at(r, j) * xhat[r]);
                            dbias.set(r, 0, dbias.at(r, 0) + g.at(r, j));
                        }
                    }
                    self.accum(x, dx);
                    self.accum(gain, dgain);
                    self.accum(bias, dbias);
                }
                Op::ColumnNorms(a) => {
                    let av = &self.nodes[a.0].value;
                    let y = &self.nodes[i].value;
                    let (d, n) = av.shape();
                    let mut da = Matrix::zeros(d, n);
                    for j in 0..n {
                        let norm = y.at(0, j);
                        if norm == 0.0 {
                            continue;
                        }
                        for r in 0..d {
                            da.set(r, j, g.at(0, j) * av.at(r, j) / norm);
                        }
                    }
                    self.accum(a, da);
                }
                Op::BroadcastCol(v) => {
                    let (d, n) = g.shape();
                    let dv = Matrix::from_fn(d, 1, |r, _| (0..n).map(|j| g.at(r, j)).sum());
                    self.accum(v, dv);
                }
                Op::BroadcastRow(v) => {
                    let (d, n) = g.shape();
                    let dv = Matrix::from_fn(1, n, |_, j| (0..d).map(|r| g.at(r, j)).sum());
                    self.accum(v, dv);
                }
                Op::SliceRows(a, start, len) => {
                    let av = &self.nodes[a.0].value;
                    let mut da = Matrix::zeros(av.rows(), av.cols());
                    for i2 in 0..len {
                        for j in 0..av.cols() {
                            da.set(start + i2, j, g.at(i2, j));
                        }
                    }
                    self.accum(a, da);
                }
                Op::SliceCols(a, start, len) => {
                    let av = &self.nodes[a.0].value;
                    let mut da = Matrix::zeros(av.rows(), av.cols());
                    for i2 in 0..av.rows() {
                        for j in 0..len {
                            da.set(i2, start + j, g.at(i2, j));
                        }
                    }
                    self.accum(a, da);
                }
                Op::ConcatRows(parts) => {
                    let mut at = 0;
                    for p in parts {
                        let rows = self.nodes[p.0].value.rows();
                        let cols = self.nodes[p.0].value.cols();
                        let dp = Matrix::from_fn(rows, cols, |r, c| g.at(at + r, c));
                        at += rows;
                        self.accum(p, dp);
                    }
                }
                Op::Sum(a) => {
                    let av = &self.nodes[a.0].value;
                    self.accum(a, Matrix::full(av.rows(), av.cols(), g.at(0, 0)));
                }
                Op::Mean(a) => {
                    let av = &self.nodes[a.0].value;
                    let s = g.at(0, 0) / av.len().max(1) as f64;
                    self.accum(a, Matrix::full(av.rows(), av.cols(), s));
                }
                Op::PickPerCol(a, rows) => {
                    let av = &self.nodes[a.0].value;
                    let mut da = Matrix::zeros(av.rows(), av.cols());
                    for (j, &r) in rows.iter().enumerate() {
                        da.set(r, j, da.at(r, j) + g.at(0, j));
                    }
                    self.accum(a, da);
                }
                Op::EmbedCols(table, ids) => {
                    let tv = &self.nodes[table.0].value;
                    let mut dt = Matrix::zeros(tv.rows(), tv.cols());
                    for (j, &t) in ids.iter().enumerate() {
                        for r in 0..tv.rows() {
                            dt.set(r, t, dt.at(r, t) + g.at(r, j));
                        }
                    }
                    self.accum(table, dt);
                }
            }
            // Intermediate gradients are no longer needed once distributed.
            if !matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].grad = None;
            }
        }
        Ok(())
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_cols_matrix(x: &Matrix) -> Matrix {
    let (d, n) = x.shape();
    let mut out = Matrix::zeros(d, n);
    for j in 0..n {
        let mut max = f64::NEG_INFINITY;
        for i in 0..d {
            max = max.max(x.at(i, j));
        }
        let mut total = 0.0;
        for i in 0..d {
            let e = (x.at(i, j) - max).exp();
            out.set(i, j, e);
            total += e;
        }
        for i in 0..d {
            out.set(i, j, out.at(i, j) / total);
        }
    }
    out
}

fn col_moments(x: &Matrix, j: usize, eps: f64) -> (f64, f64) {
    let d = x.rows() as f64;
    let mut mu = 0.0;
    for i in 0..x.rows() {
        mu += x.at(i, j);
    }
    mu /= d;
    let mut var = 0.0;
    for i in 0..x.rows() {
        let c = x.at(i, j) - mu;
        var += c * c;
    }
    var /= d;
    (mu, (var + eps).sqrt())
}

/// Central-difference gradient of a scalar function of a matrix:
/// `(f(x + h e_ij) - f(x - h e_ij)) / 2h` entrywise. Test oracle for the
/// reverse-mode pass.
pub fn finite_diff_grad(mut f: impl FnMut(&Matrix) -> f64, at: &Matrix, h: f64) -> Matrix {
    assert!(h > 0.0, "finite difference step must be positive");
    let mut grad = Matrix::zeros(at.rows(), at.cols());
    for i in 0..at.rows() {
        for j in 0..at.cols() {
            let mut plus = at.clone();
            plus.set(i, j, plus.at(i, j) + h);
            let mut minus = at.clone();
            minus.set(i, j, minus.at(i, j) - h);
            grad.set(i, j, (f(&plus) - f(&minus)) / (2.0 * h));
        }
    }
    grad
}

impl Matrix {
    /// Elementwise quotient used by the tape (shapes already validated).
    fn zip_div(&self, rhs: &Matrix) -> Matrix {
        Matrix::from_fn(self.rows(), self.cols(), |i, j| self.at(i, j) / rhs.at(i, j))
    }

    fn zip_min(&self, rhs: &Matrix) -> Option<Matrix> {
        if self.shape() != rhs.shape() {
            return None;
        }
        Some(Matrix::from_fn(self.rows(), self.cols(), |i, j| {
            self.at(i, j).min(rhs.at(i, j))
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    /// Relative error between an autodiff gradient and the central-difference
    /// oracle, normalized by the larger norm.
    fn rel_err(auto: &Matrix, fd: &Matrix) -> f64 {
        let diff = auto.sub(fd).unwrap().frobenius_norm();
        let denom = auto.frobenius_norm().max(fd.frobenius_norm()).max(1e-12);
        diff / denom
    }

    /// Checks d/dx sum(W .* f(x)) for a fixed random weighting W, which keeps
    /// the loss sensitive even when f's outputs have constant sum (softmax).
    fn check_unary(build: impl Fn(&mut Graph, NodeId) -> NodeId, x: &Matrix, tol: f64) {
        let weighted = |m: &Matrix| {
            let mut g2 = Graph::new();
            let l = g2.leaf(m.clone(), false);
            let y2 = build(&mut g2, l);
            let out = g2.value(y2);
            let w = Rng::new(99).normal_matrix(out.rows(), out.cols(), 1.0);
            out.hadamard(&w).unwrap().sum()
        };

        let mut g = Graph::new();
        let leaf = g.leaf(x.clone(), true);
        let y = build(&mut g, leaf);
        let shape = g.value(y).shape();
        let w = Rng::new(99).normal_matrix(shape.0, shape.1, 1.0);
        let wc = g.constant(w);
        let wy = g.hadamard(y, wc).unwrap();
        let loss = g.sum(wy);
        g.backward(loss).unwrap();
        let auto = g.grad(leaf).unwrap().clone();

        let fd = finite_diff_grad(weighted, x, 1e-5);
        let err = rel_err(&auto, &fd);
        assert!(err < tol, "relative gradient error {err}");
    }

    #[test]
    fn gradcheck_primitives_on_random_6x4() {
        let x = Rng::new(3).normal_matrix(6, 4, 1.0);
        check_unary(|_g, a| a, &x, 1e-7); // identity
        check_unary(|g, a| g.exp(a), &x, 1e-5);
        check_unary(
            |g, a| {
                let shifted = g.add_scalar(a, 10.0); // keep log arguments positive
                g.log(shifted)
            },
            &x,
            1e-5,
        );
        check_unary(|g, a| g.clip(a, -0.5, 0.5), &x, 1e-5);
        check_unary(|g, a| g.silu(a), &x, 1e-5);
        check_unary(|g, a| g.softmax_cols(a), &x, 1e-5);
        check_unary(|g, a| g.log_softmax_cols(a), &x, 1e-5);
        check_unary(|g, a| g.transpose(a), &x, 1e-7);
        check_unary(|g, a| g.column_norms(a), &x, 1e-5);
        check_unary(|g, a| g.mean(a), &x, 1e-5);
    }

    #[test]
    fn gradcheck_binary_ops() {
        let x = Rng::new(4).normal_matrix(6, 4, 1.0);
        let other = Rng::new(5).normal_matrix(6, 4, 1.0);
        let w = Rng::new(6).normal_matrix(3, 6, 1.0);

        // matmul wrt the left operand
        {
            let mut g = Graph::new();
            let leaf = g.leaf(w.clone(), true);
            let xc = g.constant(x.clone());
            let y = g.matmul(leaf, xc).unwrap();
            let loss = g.sum(y);
            g.backward(loss).unwrap();
            let auto = g.grad(leaf).unwrap().clone();
            let fd = finite_diff_grad(
                |m| m.matmul(&x).unwrap().sum(),
                &w,
                1e-5,
            );
            assert!(rel_err(&auto, &fd) < 1e-5);
        }
        // hadamard, div, minimum wrt the first operand
        for op in ["hadamard", "div", "min"] {
            let mut g = Graph::new();
            let leaf = g.leaf(x.clone(), true);
            let shift = g.constant(other.map(|v| v.abs() + 1.0));
            let y = match op {
                "hadamard" => g.hadamard(leaf, shift).unwrap(),
                "div" => g.div(leaf, shift).unwrap(),
                _ => g.minimum(leaf, shift).unwrap(),
            };
            let loss = g.sum(y);
            g.backward(loss).unwrap();
            let auto = g.grad(leaf).unwrap().clone();
            let denom = other.map(|v| v.abs() + 1.0);
            let fd = finite_diff_grad(
                |m| match op {
                    "hadamard" => m.hadamard(&denom).unwrap().sum(),
                    "div" => m
                        .hadamard(&denom.map(|v| 1.0 / v))
                        .unwrap()
                        .sum(),
                    _ => Matrix::from_fn(m.rows(), m.cols(), |i, j| {
                        m.at(i, j).min(denom.at(i, j))
                    })
                    .sum(),
                },
                &x,
                1e-5,
            );
            assert!(rel_err(&auto, &fd) < 1e-5, "{op}");
        }
    }

    #[test]
    fn gradcheck_layer_norm_all_inputs() {
        let x = Rng::new(7).normal_matrix(6, 4, 1.0);
        let gain = Rng::new(8).normal_matrix(6, 1, 1.0);
        let bias = Rng::new(9).normal_matrix(6, 1, 1.0);
        let eps = 1e-5;

        let eval = |xm: &Matrix, gm: &Matrix, bm: &Matrix| {
            let mut g = Graph::new();
            let xi = g.constant(xm.clone());
            let gi = g.constant(gm.clone());
            let bi = g.constant(bm.clone());
            let y = g.layer_norm_cols(xi, gi, bi, eps).unwrap();
            g.value(y).sum()
        };

        let mut g = Graph::new();
        let xi = g.leaf(x.clone(), true);
        let gi = g.leaf(gain.clone(), true);
        let bi = g.leaf(bias.clone(), true);
        let y = g.layer_norm_cols(xi, gi, bi, eps).unwrap();
        let loss = g.sum(y);
        g.backward(loss).unwrap();

        let fd_x = finite_diff_grad(|m| eval(m, &gain, &bias), &x, 1e-5);
        let fd_g = finite_diff_grad(|m| eval(&x, m, &bias), &gain, 1e-5);
        let fd_b = finite_diff_grad(|m| eval(&x, &gain, m), &bias, 1e-5);
        assert!(rel_err(g.grad(xi).unwrap(), &fd_x) < 1e-5);
        assert!(rel_err(g.grad(gi).unwrap(), &fd_g) < 1e-5);
        assert!(rel_err(g.grad(bi).unwrap(), &fd_b) < 1e-5);
    }

    #[test]
    fn gradcheck_structural_ops() {
        let x = Rng::new(10).normal_matrix(6, 4, 1.0);
        check_unary(|g, a| g.slice_rows(a, 1, 3).unwrap(), &x, 1e-7);
        check_unary(|g, a| g.slice_cols(a, 0, 2).unwrap(), &x, 1e-7);
        check_unary(
            |g, a| {
                let top = g.slice_rows(a, 0, 2).unwrap();
                let bottom = g.slice_rows(a, 2, 4).unwrap();
                g.concat_rows(&[bottom, top]).unwrap()
            },
            &x,
            1e-7,
        );
        check_unary(|g, a| g.pick_per_col(a, vec![0, 3, 2, 5]).unwrap(), &x, 1e-7);

        let v = Rng::new(11).normal_matrix(6, 1, 1.0);
        check_unary(|g, a| g.broadcast_col(a, 5).unwrap(), &v, 1e-7);
        let e = Rng::new(12).normal_matrix(4, 8, 1.0);
        check_unary(|g, a| g.embed_cols(a, &[1, 1, 7, 0]).unwrap(), &e, 1e-7);
    }

    #[test]
    fn grad_of_sum_of_product_is_outer() {
        // loss = sum(W x): dL/dW = 1 x^T replicated over rows.
        let w = Rng::new(13).normal_matrix(3, 4, 1.0);
        let x = Rng::new(14).normal_matrix(4, 1, 1.0);
        let mut g = Graph::new();
        let wl = g.leaf(w, true);
        let xc = g.constant(x.clone());
        let y = g.matmul(wl, xc).unwrap();
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        let grad = g.grad(wl).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                assert!((grad.at(i, j) - x.at(j, 0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unused_leaf_gets_no_gradient() {
        let mut g = Graph::new();
        let used = g.leaf(Matrix::identity(2), true);
        let unused = g.leaf(Matrix::identity(2), true);
        let loss = g.sum(used);
        g.backward(loss).unwrap();
        assert!(g.grad(unused).is_none());
        assert_eq!(g.grad_or_zeros(unused), Matrix::zeros(2, 2));
    }

    #[test]
    fn backward_rejects_non_scalar_and_double_use() {
        let mut g = Graph::new();
        let a = g.leaf(Matrix::identity(2), true);
        assert!(g.backward(a).is_err());
        let mut g = Graph::new();
        let a = g.leaf(Matrix::identity(2), true);
        let loss = g.sum(a);
        g.backward(loss).unwrap();
        assert!(g.backward(loss).is_err());
        g.reset();
        assert!(g.grad(a).is_none());
    }

    #[test]
    fn finite_diff_oracle_known_gradients() {
        let x = Rng::new(15).normal_matrix(3, 3, 1.0);
        // f = ||x||^2 / 2 has gradient x.
        let fd = finite_diff_grad(|m| 0.5 * m.data().iter().map(|v| v * v).sum::<f64>(), &x, 1e-6);
        assert!(rel_err(&fd, &x) < 1e-6);
        // constant f has zero gradient.
        let fd = finite_diff_grad(|_| 3.25, &x, 1e-6);
        assert_eq!(fd, Matrix::zeros(3, 3));
        // f = sum(x) has gradient of ones.
        let fd = finite_diff_grad(|m| m.sum(), &x, 1e-6);
        assert!(fd.max_abs_diff(&Matrix::full(3, 3, 1.0)).unwrap() < 1e-9);
    }
}
