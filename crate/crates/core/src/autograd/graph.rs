use std::collections::BTreeMap;

use super::tensor::{matmul, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulScalar(NodeId, NodeId),
    Scale(NodeId, f64),
    Exp(NodeId),
    Log(NodeId),
    Sigmoid(NodeId),
    Gelu(NodeId),
    Square(NodeId),
    Clamp(NodeId, f64, f64),
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: Option<NodeId>,
        beta: Option<NodeId>,
        xhat: Tensor,
        rstd: Vec<f64>,
    },
    L2NormalizeRows {
        x: NodeId,
        norms: Vec<f64>,
    },
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceRows(NodeId, usize),
    SliceCols(NodeId, usize),
    GatherRows(NodeId, Vec<usize>),
    RepeatRows(NodeId),
    MeanRows(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    StraightThrough(NodeId),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of tensor operations for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so reverse insertion order is a
/// valid topological order for the backward sweep. Nodes that do not depend
/// on any gradient-requiring leaf are skipped during backward.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, NodeId>,
}

pub const LAYER_NORM_EPS: f64 = 1e-6;
const L2_EPS: f64 = 1e-12;

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    assert_eq!(a.shape(), b.shape(), "elementwise shape mismatch");
    Tensor {
        rows: a.rows,
        cols: a.cols,
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf, false)
    }

    /// An unnamed leaf that receives gradient.
    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf, true)
    }

    /// A named leaf, created once per key and reused on later lookups.
    pub fn param(&mut self, key: &str, t: &Tensor, trainable: bool) -> NodeId {
        if let Some(&id) = self.params.get(key) {
            return id;
        }
        let id = self.push(t.clone(), Op::Leaf, trainable);
        self.params.insert(key.to_string(), id);
        id
    }

    pub fn named_params(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.params.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Same value, cut from the tape.
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).clone();
        self.constant(v)
    }

    /// Takes the value of `value` and passes the incoming gradient unchanged
    /// to `through`; `value` receives nothing.
    pub fn straight_through(&mut self, through: NodeId, value: NodeId) -> NodeId {
        assert_eq!(
            self.value(through).shape(),
            self.value(value).shape(),
            "straight_through shape mismatch"
        );
        let v = self.value(value).clone();
        let rg = self.rg(&[through]);
        self.push(v, Op::StraightThrough(through), rg)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = matmul(self.value(a), false, self.value(b), false);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        let rg = self.rg(&[a]);
        self.push(v, Op::Transpose(a), rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = elementwise(self.value(a), self.value(b), |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = elementwise(self.value(a), self.value(b), |x, y| x - y);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = elementwise(self.value(a), self.value(b), |x, y| x * y);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Mul(a, b), rg)
    }

    /// `a + row` with `row` (1 × n) broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!(rv.rows, 1, "add_row expects a 1×n row");
        assert_eq!(av.cols, rv.cols, "add_row column mismatch");
        let mut v = av.clone();
        for r in 0..v.rows {
            for c in 0..v.cols {
                v.data[r * v.cols + c] += rv.data[c];
            }
        }
        let rg = self.rg(&[a, row]);
        self.push(v, Op::AddRow(a, row), rg)
    }

    /// `s · a` with `s` a 1 × 1 node.
    pub fn mul_scalar(&mut self, a: NodeId, s: NodeId) -> NodeId {
        let sv = self.value(s).item();
        let v = self.value(a).map(|x| x * sv);
        let rg = self.rg(&[a, s]);
        self.push(v, Op::MulScalar(a, s), rg)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, c), rg)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::exp);
        let rg = self.rg(&[a]);
        self.push(v, Op::Exp(a), rg)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::ln);
        let rg = self.rg(&[a]);
        self.push(v, Op::Log(a), rg)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(sigmoid);
        let rg = self.rg(&[a]);
        self.push(v, Op::Sigmoid(a), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(gelu);
        let rg = self.rg(&[a]);
        self.push(v, Op::Gelu(a), rg)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x * x);
        let rg = self.rg(&[a]);
        self.push(v, Op::Square(a), rg)
    }

    /// Clamp to `[lo, hi]`; gradient is zero where the clamp is active.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        let rg = self.rg(&[a]);
        self.push(v, Op::Clamp(a, lo, hi), rg)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let v = softmax_rows(self.value(a));
        let rg = self.rg(&[a]);
        self.push(v, Op::SoftmaxRows(a), rg)
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let mut v = x.clone();
        for r in 0..x.rows {
            let row = x.row_slice(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
            for c in 0..x.cols {
                v.data[r * x.cols + c] = row[c] - lse;
            }
        }
        let rg = self.rg(&[a]);
        self.push(v, Op::LogSoftmaxRows(a), rg)
    }

    /// Row-wise layer normalization with optional affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: NodeId, gamma: Option<NodeId>, beta: Option<NodeId>) -> NodeId {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let mut xhat = Tensor::zeros(rows, cols);
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = xv.row_slice(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = s;
            for c in 0..cols {
                xhat.data[r * cols + c] = (row[c] - mean) * s;
            }
        }
        let mut out = xhat.clone();
        if let Some(g) = gamma {
            let gv = self.value(g);
            assert_eq!(gv.shape(), (1, cols), "layer_norm gamma shape");
            for r in 0..rows {
                for c in 0..cols {
                    out.data[r * cols + c] *= gv.data[c];
                }
            }
        }
        if let Some(b) = beta {
            let bv = self.value(b);
            assert_eq!(bv.shape(), (1, cols), "layer_norm beta shape");
            for r in 0..rows {
                for c in 0..cols {
                    out.data[r * cols + c] += bv.data[c];
                }
            }
        }
        let mut deps = vec![x];
        deps.extend(gamma);
        deps.extend(beta);
        let rg = self.rg(&deps);
        self.push(
            out,
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

    pub fn l2_normalize_rows(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let mut out = xv.clone();
        let mut norms = vec![0.0; xv.rows];
        for r in 0..xv.rows {
            let n = xv.row_slice(r).iter().map(|v| v * v).sum::<f64>().sqrt().max(L2_EPS);
            norms[r] = n;
            for c in 0..xv.cols {
                out.data[r * xv.cols + c] /= n;
            }
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::L2NormalizeRows { x, norms }, rg)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let vals: Vec<Tensor> = parts.iter().map(|&p| self.value(p).clone()).collect();
        let v = Tensor::stack_rows(&vals);
        let rg = self.rg(parts);
        self.push(v, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut v = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows, rows, "concat_cols row mismatch");
            for r in 0..rows {
                v.data[r * cols + off..r * cols + off + pv.cols].copy_from_slice(pv.row_slice(r));
            }
            off += pv.cols;
        }
        let rg = self.rg(parts);
        self.push(v, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let av = self.value(a);
        assert!(start + len <= av.rows, "slice_rows out of range");
        let v = Tensor::from_vec(
            len,
            av.cols,
            av.data[start * av.cols..(start + len) * av.cols].to_vec(),
        );
        let rg = self.rg(&[a]);
        self.push(v, Op::SliceRows(a, start), rg)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let av = self.value(a);
        assert!(start + len <= av.cols, "slice_cols out of range");
        let mut v = Tensor::zeros(av.rows, len);
        for r in 0..av.rows {
            v.data[r * len..(r + 1) * len]
                .copy_from_slice(&av.data[r * av.cols + start..r * av.cols + start + len]);
        }
        let rg = self.rg(&[a]);
        self.push(v, Op::SliceCols(a, start), rg)
    }

    /// Rows of `a` in the order of `idx`; indices may repeat.
    pub fn gather_rows(&mut self, a: NodeId, idx: &[usize]) -> NodeId {
        let v = self.value(a).select_rows(idx);
        let rg = self.rg(&[a]);
        self.push(v, Op::GatherRows(a, idx.to_vec()), rg)
    }

    /// Repeat a 1 × n row `count` times.
    pub fn repeat_rows(&mut self, a: NodeId, count: usize) -> NodeId {
        let av = self.value(a);
        assert_eq!(av.rows, 1, "repeat_rows expects a single row");
        let mut data = Vec::with_capacity(count * av.cols);
        for _ in 0..count {
            data.extend_from_slice(&av.data);
        }
        let v = Tensor::from_vec(count, av.cols, data);
        let rg = self.rg(&[a]);
        self.push(v, Op::RepeatRows(a), rg)
    }

    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mean_rows();
        let rg = self.rg(&[a]);
        self.push(v, Op::MeanRows(a), rg)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).data.iter().sum());
        let rg = self.rg(&[a]);
        self.push(v, Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let v = Tensor::scalar(av.data.iter().sum::<f64>() / av.len().max(1) as f64);
        let rg = self.rg(&[a]);
        self.push(v, Op::MeanAll(a), rg)
    }

    /// Sum of scalar nodes.
    pub fn add_scalars(&mut self, parts: &[NodeId]) -> NodeId {
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = self.add(acc, p);
        }
        acc
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: NodeId) -> Gradients {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward from a non-scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn accum(&self, grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                if self.requires_grad(a) {
                    self.accum(grads, a, matmul(g, false, self.value(b), true));
                }
                if self.requires_grad(b) {
                    self.accum(grads, b, matmul(self.value(a), true, g, false));
                }
            }
            &Op::Transpose(a) => self.accum(grads, a, g.transpose()),
            &Op::Add(a, b) => {
                self.accum(grads, a, g.clone());
                self.accum(grads, b, g.clone());
            }
            &Op::Sub(a, b) => {
                self.accum(grads, a, g.clone());
                self.accum(grads, b, g.map(|v| -v));
            }
            &Op::Mul(a, b) => {
                if self.requires_grad(a) {
                    self.accum(grads, a, elementwise(g, self.value(b), |x, y| x * y));
                }
                if self.requires_grad(b) {
                    self.accum(grads, b, elementwise(g, self.value(a), |x, y| x * y));
                }
            }
            &Op::AddRow(a, row) => {
                self.accum(grads, a, g.clone());
                if self.requires_grad(row) {
                    let mut gr = Tensor::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            gr.data[c] += g.data[r * g.cols + c];
                        }
                    }
                    self.accum(grads, row, gr);
                }
            }
            &Op::MulScalar(a, s) => {
                let sv = self.value(s).item();
                self.accum(grads, a, g.map(|v| v * sv));
                if self.requires_grad(s) {
                    let d: f64 = g.data.iter().zip(&self.value(a).data).map(|(x, y)| x * y).sum();
                    self.accum(grads, s, Tensor::scalar(d));
                }
            }
            &Op::Scale(a, c) => self.accum(grads, a, g.map(|v| v * c)),
            &Op::Exp(a) => self.accum(grads, a, elementwise(g, out, |x, y| x * y)),
            &Op::Log(a) => self.accum(grads, a, elementwise(g, self.value(a), |x, y| x / y)),
            &Op::Sigmoid(a) => self.accum(grads, a, elementwise(g, out, |x, y| x * y * (1.0 - y))),
            &Op::Gelu(a) => self.accum(grads, a, elementwise(g, self.value(a), |x, y| x * gelu_grad(y))),
            &Op::Square(a) => self.accum(grads, a, elementwise(g, self.value(a), |x, y| 2.0 * x * y)),
            &Op::Clamp(a, lo, hi) => self.accum(
                grads,
                a,
                elementwise(g, self.value(a), |x, y| if y > lo && y < hi { x } else { 0.0 }),
            ),
            &Op::SoftmaxRows(a) => {
                let mut ga = Tensor::zeros(g.rows, g.cols);
                for r in 0..g.rows {
                    let y = out.row_slice(r);
                    let gy = g.row_slice(r);
                    let dot: f64 = y.iter().zip(gy).map(|(p, q)| p * q).sum();
                    for c in 0..g.cols {
                        ga.data[r * g.cols + c] = y[c] * (gy[c] - dot);
                    }
                }
                self.accum(grads, a, ga);
            }
            &Op::LogSoftmaxRows(a) => {
                let mut ga = Tensor::zeros(g.rows, g.cols);
                for r in 0..g.rows {
                    let y = out.row_slice(r);
                    let gy = g.row_slice(r);
                    let total: f64 = gy.iter().sum();
                    for c in 0..g.cols {
                        ga.data[r * g.cols + c] = gy[c] - y[c].exp() * total;
                    }
                }
                self.accum(grads, a, ga);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (rows, cols) = g.shape();
                let gamma_v = gamma.map(|id| self.value(id));
                if let Some(b) = beta {
                    if self.requires_grad(*b) {
                        let mut gb = Tensor::zeros(1, cols);
                        for r in 0..rows {
                            for c in 0..cols {
                                gb.data[c] += g.data[r * cols + c];
                            }
                        }
                        self.accum(grads, *b, gb);
                    }
                }
                if let Some(gm) = gamma {
                    if self.requires_grad(*gm) {
                        let mut gg = Tensor::zeros(1, cols);
                        for r in 0..rows {
                            for c in 0..cols {
                                gg.data[c] += g.data[r * cols + c] * xhat.data[r * cols + c];
                            }
                        }
                        self.accum(grads, *gm, gg);
                    }
                }
                if self.requires_grad(*x) {
                    let mut gx = Tensor::zeros(rows, cols);
                    let mut dxhat = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            let gv = g.data[r * cols + c];
                            dxhat[c] = match gamma_v {
                                Some(gm) => gv * gm.data[c],
                                None => gv,
                            };
                        }
                        let xh = xhat.row_slice(r);
                        let m1 = dxhat.iter().sum::<f64>() / cols as f64;
                        let m2 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                        for c in 0..cols {
                            gx.data[r * cols + c] = rstd[r] * (dxhat[c] - m1 - xh[c] * m2);
                        }
                    }
                    self.accum(grads, *x, gx);
                }
            }
            Op::L2NormalizeRows { x, norms } => {
                let mut gx = Tensor::zeros(g.rows, g.cols);
                for r in 0..g.rows {
                    let y = out.row_slice(r);
                    let gy = g.row_slice(r);
                    let dot: f64 = y.iter().zip(gy).map(|(p, q)| p * q).sum();
                    for c in 0..g.cols {
                        gx.data[r * g.cols + c] = (gy[c] - y[c] * dot) / norms[r];
                    }
                }
                self.accum(grads, *x, gx);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let rows = self.value(p).rows;
                    if self.requires_grad(p) {
                        let part = Tensor::from_vec(
                            rows,
                            g.cols,
                            g.data[start * g.cols..(start + rows) * g.cols].to_vec(),
                        );
                        self.accum(grads, p, part);
                    }
                    start += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let cols = self.value(p).cols;
                    if self.requires_grad(p) {
                        let mut part = Tensor::zeros(g.rows, cols);
                        for r in 0..g.rows {
                            part.data[r * cols..(r + 1) * cols]
                                .copy_from_slice(&g.data[r * g.cols + off..r * g.cols + off + cols]);
                        }
                        self.accum(grads, p, part);
                    }
                    off += cols;
                }
            }
            &Op::SliceRows(a, start) => {
                let av = self.value(a);
                let mut ga = Tensor::zeros(av.rows, av.cols);
                ga.data[start * av.cols..start * av.cols + g.len()].copy_from_slice(&g.data);
                self.accum(grads, a, ga);
            }
            &Op::SliceCols(a, start) => {
                let av = self.value(a);
                let mut ga = Tensor::zeros(av.rows, av.cols);
                for r in 0..av.rows {
                    ga.data[r * av.cols + start..r * av.cols + start + g.cols]
                        .copy_from_slice(g.row_slice(r));
                }
                self.accum(grads, a, ga);
            }
            Op::GatherRows(a, idx) => {
                let av = self.value(*a);
                let mut ga = Tensor::zeros(av.rows, av.cols);
                for (k, &r) in idx.iter().enumerate() {
                    for c in 0..av.cols {
                        ga.data[r * av.cols + c] += g.data[k * av.cols + c];
                    }
                }
                self.accum(grads, *a, ga);
            }
            &Op::RepeatRows(a) => {
                let mut ga = Tensor::zeros(1, g.cols);
                for r in 0..g.rows {
                    for c in 0..g.cols {
                        ga.data[c] += g.data[r * g.cols + c];
                    }
                }
                self.accum(grads, a, ga);
            }
            &Op::MeanRows(a) => {
                let av = self.value(a);
                let n = av.rows as f64;
                let mut ga = Tensor::zeros(av.rows, av.cols);
                for r in 0..av.rows {
                    for c in 0..av.cols {
                        ga.data[r * av.cols + c] = g.data[c] / n;
                    }
                }
                self.accum(grads, a, ga);
            }
            &Op::SumAll(a) => {
                let av = self.value(a);
                self.accum(grads, a, Tensor::filled(av.rows, av.cols, g.item()));
            }
            &Op::MeanAll(a) => {
                let av = self.value(a);
                let n = av.len().max(1) as f64;
                self.accum(grads, a, Tensor::filled(av.rows, av.cols, g.item() / n));
            }
            &Op::StraightThrough(a) => self.accum(grads, a, g.clone()),
        }
    }
}

pub(crate) fn softmax_rows(x: &Tensor) -> Tensor {
    let mut v = x.clone();
    for r in 0..x.rows {
        let row = x.row_slice(r);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for c in 0..x.cols {
            let e = (row[c] - m).exp();
            v.data[r * x.cols + c] = e;
            s += e;
        }
        for c in 0..x.cols {
            v.data[r * x.cols + c] /= s;
        }
    }
    v
}

/// Result of a backward sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `id`, or zeros of its shape if nothing flowed into it.
    pub fn wrt(&self, graph: &Graph, id: NodeId) -> Tensor {
        match self.get(id) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = graph.value(id).shape();
                Tensor::zeros(r, c)
            }
        }
    }

    /// Gradients of every named parameter whose key starts with `prefix`,
    /// with the prefix stripped. Parameters that received nothing map to
    /// zeros.
    pub fn params(&self, graph: &Graph, prefix: &str) -> BTreeMap<String, Tensor> {
        graph
            .named_params()
            .filter_map(|(k, id)| {
                k.strip_prefix(prefix)
                    .map(|name| (name.to_string(), self.wrt(graph, id)))
            })
            .collect()
    }

    /// Euclidean norm over the gradients of all named parameters whose key
    /// starts with any of `prefixes`.
    pub fn norm_of(&self, graph: &Graph, prefixes: &[&str]) -> f64 {
        graph
            .named_params()
            .filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p)))
            .filter_map(|(_, id)| self.get(id))
            .map(|g| g.data.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}
