//! Define-by-run compute graph with a single reverse pass.

use std::collections::BTreeMap;

use super::special;
use super::{DiffError, Param, Tensor};

/// Epsilon inside layer normalization's variance clamp.
pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node in a [`Graph`]. Only meaningful for the graph that
/// produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    ScaleRows(NodeId, NodeId),
    Affine(NodeId, f64),
    Softmax(NodeId),
    LayerNorm(NodeId, NodeId, NodeId),
    Gelu(NodeId),
    Softplus(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Lgamma(NodeId),
    Slice(NodeId, usize, usize, usize),
    Concat(NodeId, NodeId, usize),
    ReduceSum(NodeId, Option<usize>),
    ReduceMean(NodeId, Option<usize>),
}

#[derive(Debug)]
struct Node {
    tensor: Tensor,
    op: Op,
    name: Option<String>,
}

/// Append-only tape of tensors. Node order is topological by construction,
/// so one reverse sweep visits every node exactly once.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaf_ids: std::collections::BTreeMap<String, NodeId>,
    backward_run: bool,
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

    /// Forward value of a node.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].tensor
    }

    pub fn data(&self, id: NodeId) -> &[f64] {
        self.nodes[id.0].tensor.data()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].tensor.shape()
    }

    /// Gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].tensor.grad()
    }

    fn push(&mut self, tensor: Tensor, op: Op, name: Option<String>) -> NodeId {
        self.nodes.push(Node { tensor, op, name });
        NodeId(self.nodes.len() - 1)
    }

    fn check_finite(data: &[f64], op: &'static str) -> Result<(), DiffError> {
        if data.iter().any(|v| !v.is_finite()) {
            Err(DiffError::NonFinite { op })
        } else {
            Ok(())
        }
    }

    fn push_checked(
        &mut self,
        data: Vec<f64>,
        shape: &[usize],
        requires_grad: bool,
        op: Op,
        op_name: &'static str,
    ) -> Result<NodeId, DiffError> {
        Self::check_finite(&data, op_name)?;
        let t = Tensor::new(data, shape)?.with_requires_grad(requires_grad);
        Ok(self.push(t, op, None))
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].tensor.requires_grad())
    }

    // ---- leaves ------------------------------------------------------

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(t.with_requires_grad(false), Op::Leaf, None)
    }

    /// Convenience scalar constant.
    pub fn scalar(&mut self, v: f64) -> Result<NodeId, DiffError> {
        Ok(self.constant(Tensor::scalar(v)?))
    }

    /// Convenience matrix constant.
    pub fn matrix(&mut self, data: Vec<f64>, shape: &[usize]) -> Result<NodeId, DiffError> {
        Ok(self.constant(Tensor::new(data, shape)?))
    }

    /// Named leaf; gradient is accumulated here when `trainable`.
    pub fn leaf(
        &mut self,
        name: &str,
        t: Tensor,
        trainable: bool,
    ) -> Result<NodeId, DiffError> {
        if self.leaf_ids.contains_key(name) {
            return Err(DiffError::DuplicateLeaf { name: name.into() });
        }
        let t = t.with_requires_grad(trainable);
        let id = self.push(t, Op::Leaf, Some(name.to_string()));
        self.leaf_ids.insert(name.to_string(), id);
        Ok(id)
    }

    /// Inserts a parameter as a named leaf, honoring its trainable flag.
    /// A parameter already present (same name) returns its existing node, so
    /// weight sharing within one graph is safe.
    pub fn param(&mut self, p: &Param) -> Result<NodeId, DiffError> {
        if let Some(&id) = self.leaf_ids.get(p.name()) {
            debug_assert_eq!(
                self.nodes[id.0].tensor.data(),
                p.data(),
                "shared leaf {} diverged",
                p.name()
            );
            return Ok(id);
        }
        self.leaf(p.name(), p.tensor()?, p.trainable())
    }

    // ---- linear algebra ----------------------------------------------

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let (ta, tb) = (&self.nodes[a.0].tensor, &self.nodes[b.0].tensor);
        if ta.rank() != 2 || tb.rank() != 2 || ta.cols() != tb.rows() {
            return Err(DiffError::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; n * m];
        let (da, db) = (ta.data(), tb.data());
        for i in 0..n {
            for l in 0..k {
                let a_il = da[i * k + l];
                if a_il == 0.0 {
                    continue;
                }
                let brow = &db[l * m..(l + 1) * m];
                let orow = &mut out[i * m..(i + 1) * m];
                for (o, bv) in orow.iter_mut().zip(brow) {
                    *o += a_il * bv;
                }
            }
        }
        let rg = self.any_grad(&[a, b]);
        self.push_checked(out, &[n, m], rg, Op::Matmul(a, b), "matmul")
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        let t = &self.nodes[x.0].tensor;
        if t.rank() != 2 {
            return Err(DiffError::InvalidShape {
                op: "transpose",
                shape: t.shape().to_vec(),
                msg: "expects rank 2".into(),
            });
        }
        let (n, m) = (t.rows(), t.cols());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = t.at(i, j);
            }
        }
        let rg = self.any_grad(&[x]);
        self.push_checked(out, &[m, n], rg, Op::Transpose(x), "transpose")
    }

    // ---- elementwise binary ------------------------------------------

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        op_name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId, DiffError> {
        let (ta, tb) = (&self.nodes[a.0].tensor, &self.nodes[b.0].tensor);
        if ta.shape() != tb.shape() {
            return Err(DiffError::ShapeMismatch {
                op: op_name,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let out: Vec<f64> = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = ta.shape().to_vec();
        let rg = self.any_grad(&[a, b]);
        self.push_checked(out, &shape, rg, op, op_name)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    /// `x + b` where `b` is broadcast across rows: `[n, m] + [m]`.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let (tx, tb) = (&self.nodes[x.0].tensor, &self.nodes[b.0].tensor);
        if tx.rank() != 2 || tb.rank() != 1 || tb.numel() != tx.cols() {
            return Err(DiffError::ShapeMismatch {
                op: "add_bias",
                lhs: tx.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (n, m) = (tx.rows(), tx.cols());
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            for j in 0..m {
                out.push(tx.at(i, j) + tb.data()[j]);
            }
        }
        let rg = self.any_grad(&[x, b]);
        self.push_checked(out, &[n, m], rg, Op::AddBias(x, b), "add_bias")
    }

    /// Multiplies row `i` of `x` by `c[i]`; `c` may be `[n]` or `[n, 1]`.
    pub fn scale_rows(&mut self, x: NodeId, c: NodeId) -> Result<NodeId, DiffError> {
        let (tx, tc) = (&self.nodes[x.0].tensor, &self.nodes[c.0].tensor);
        if tx.rank() != 2 || tc.numel() != tx.rows() {
            return Err(DiffError::ShapeMismatch {
                op: "scale_rows",
                lhs: tx.shape().to_vec(),
                rhs: tc.shape().to_vec(),
            });
        }
        let (n, m) = (tx.rows(), tx.cols());
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            let ci = tc.data()[i];
            for j in 0..m {
                out.push(tx.at(i, j) * ci);
            }
        }
        let rg = self.any_grad(&[x, c]);
        self.push_checked(out, &[n, m], rg, Op::ScaleRows(x, c), "scale_rows")
    }

    /// `a * x + b` with scalar constants.
    pub fn affine(&mut self, x: NodeId, a: f64, b: f64) -> Result<NodeId, DiffError> {
        let tx = &self.nodes[x.0].tensor;
        let out: Vec<f64> = tx.data().iter().map(|&v| a * v + b).collect();
        let shape = tx.shape().to_vec();
        let rg = self.any_grad(&[x]);
        self.push_checked(out, &shape, rg, Op::Affine(x, a), "affine")
    }

    // ---- elementwise unary -------------------------------------------

    fn unary(
        &mut self,
        x: NodeId,
        op_name: &'static str,
        f: impl Fn(f64) -> Result<f64, DiffError>,
        op: Op,
    ) -> Result<NodeId, DiffError> {
        let tx = &self.nodes[x.0].tensor;
        let mut out = Vec::with_capacity(tx.numel());
        for &v in tx.data() {
            out.push(f(v)?);
        }
        let shape = tx.shape().to_vec();
        let rg = self.any_grad(&[x]);
        self.push_checked(out, &shape, rg, op, op_name)
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        self.unary(x, "gelu", |v| Ok(special::gelu(v)), Op::Gelu(x))
    }

    pub fn softplus(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        self.unary(x, "softplus", |v| Ok(special::softplus(v)), Op::Softplus(x))
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        self.unary(x, "exp", |v| Ok(v.exp()), Op::Exp(x))
    }

    /// Natural log; errors on non-positive inputs.
    pub fn log(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        self.unary(
            x,
            "log",
            |v| {
                if v > 0.0 {
                    Ok(v.ln())
                } else {
                    Err(DiffError::Domain { op: "log", value: v })
                }
            },
            Op::Log(x),
        )
    }

    /// Log-gamma; errors on non-positive inputs.
    pub fn lgamma(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        self.unary(x, "lgamma", special::lgamma, Op::Lgamma(x))
    }

    // ---- row-structured ops ------------------------------------------

    /// Row-wise softmax. Rank-1 input is treated as a single row.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        let tx = &self.nodes[x.0].tensor;
        let (n, m) = (tx.rows(), tx.cols());
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            let row: Vec<f64> = (0..m).map(|j| tx.at(i, j)).collect();
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            out.extend(exps.iter().map(|e| e / sum));
        }
        let shape = tx.shape().to_vec();
        let rg = self.any_grad(&[x]);
        self.push_checked(out, &shape, rg, Op::Softmax(x), "softmax")
    }

    /// Row-wise layer normalization with learned gain and bias of length
    /// `cols(x)`.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
    ) -> Result<NodeId, DiffError> {
        let (tx, tg, tb) = (
            &self.nodes[x.0].tensor,
            &self.nodes[gain.0].tensor,
            &self.nodes[bias.0].tensor,
        );
        if tx.rank() != 2 || tg.numel() != tx.cols() || tb.numel() != tx.cols() {
            return Err(DiffError::ShapeMismatch {
                op: "layer_norm",
                lhs: tx.shape().to_vec(),
                rhs: tg.shape().to_vec(),
            });
        }
        let (n, m) = (tx.rows(), tx.cols());
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            let row: Vec<f64> = (0..m).map(|j| tx.at(i, j)).collect();
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for j in 0..m {
                out.push((row[j] - mean) * inv * tg.data()[j] + tb.data()[j]);
            }
        }
        let rg = self.any_grad(&[x, gain, bias]);
        self.push_checked(out, &[n, m], rg, Op::LayerNorm(x, gain, bias), "layer_norm")
    }

    // ---- shape ops ----------------------------------------------------

    /// Contiguous range `[start, end)` along `axis`.
    pub fn slice(
        &mut self,
        x: NodeId,
        axis: usize,
        start: usize,
        end: usize,
    ) -> Result<NodeId, DiffError> {
        let tx = &self.nodes[x.0].tensor;
        let rank = tx.rank();
        if axis >= rank {
            return Err(DiffError::InvalidShape {
                op: "slice",
                shape: tx.shape().to_vec(),
                msg: format!("axis {axis} out of range"),
            });
        }
        let dim = tx.shape()[axis];
        if start >= end || end > dim {
            return Err(DiffError::InvalidShape {
                op: "slice",
                shape: tx.shape().to_vec(),
                msg: format!("range {start}..{end} invalid for axis of size {dim}"),
            });
        }
        let (out, shape): (Vec<f64>, Vec<usize>) = if rank == 1 {
            (tx.data()[start..end].to_vec(), vec![end - start])
        } else {
            let (n, m) = (tx.rows(), tx.cols());
            if axis == 0 {
                (tx.data()[start * m..end * m].to_vec(), vec![end - start, m])
            } else {
                let mut v = Vec::with_capacity(n * (end - start));
                for i in 0..n {
                    v.extend_from_slice(&tx.data()[i * m + start..i * m + end]);
                }
                (v, vec![n, end - start])
            }
        };
        let rg = self.any_grad(&[x]);
        self.push_checked(out, &shape, rg, Op::Slice(x, axis, start, end), "slice")
    }

    /// Concatenation along `axis`; the other dimension must match.
    pub fn concat(&mut self, a: NodeId, b: NodeId, axis: usize) -> Result<NodeId, DiffError> {
        let (ta, tb) = (&self.nodes[a.0].tensor, &self.nodes[b.0].tensor);
        let mismatch = || DiffError::ShapeMismatch {
            op: "concat",
            lhs: ta.shape().to_vec(),
            rhs: tb.shape().to_vec(),
        };
        if ta.rank() != tb.rank() || axis >= ta.rank() {
            return Err(mismatch());
        }
        let (out, shape): (Vec<f64>, Vec<usize>) = if ta.rank() == 1 {
            if axis != 0 {
                return Err(mismatch());
            }
            let mut v = ta.data().to_vec();
            v.extend_from_slice(tb.data());
            let len = v.len();
            (v, vec![len])
        } else if axis == 0 {
            if ta.cols() != tb.cols() {
                return Err(mismatch());
            }
            let mut v = ta.data().to_vec();
            v.extend_from_slice(tb.data());
            (v, vec![ta.rows() + tb.rows(), ta.cols()])
        } else {
            if ta.rows() != tb.rows() {
                return Err(mismatch());
            }
            let (n, ma, mb) = (ta.rows(), ta.cols(), tb.cols());
            let mut v = Vec::with_capacity(n * (ma + mb));
            for i in 0..n {
                v.extend_from_slice(&ta.data()[i * ma..(i + 1) * ma]);
                v.extend_from_slice(&tb.data()[i * mb..(i + 1) * mb]);
            }
            (v, vec![n, ma + mb])
        };
        let rg = self.any_grad(&[a, b]);
        self.push_checked(out, &shape, rg, Op::Concat(a, b, axis), "concat")
    }

    // ---- reductions ---------------------------------------------------

    fn reduce(
        &mut self,
        x: NodeId,
        axis: Option<usize>,
        mean: bool,
    ) -> Result<NodeId, DiffError> {
        let tx = &self.nodes[x.0].tensor;
        let op_name: &'static str = if mean { "reduce_mean" } else { "reduce_sum" };
        if let Some(ax) = axis {
            if ax >= tx.rank() {
                return Err(DiffError::InvalidShape {
                    op: op_name,
                    shape: tx.shape().to_vec(),
                    msg: format!("axis {ax} out of range"),
                });
            }
        }
        let (n, m) = (tx.rows(), tx.cols());
        let (out, shape): (Vec<f64>, Vec<usize>) = match axis {
            None => {
                let s: f64 = tx.data().iter().sum();
                let denom = if mean { tx.numel() as f64 } else { 1.0 };
                (vec![s / denom], vec![1])
            }
            Some(0) if tx.rank() == 1 => {
                let s: f64 = tx.data().iter().sum();
                let denom = if mean { tx.numel() as f64 } else { 1.0 };
                (vec![s / denom], vec![1])
            }
            Some(0) => {
                let mut v = vec![0.0; m];
                for i in 0..n {
                    for j in 0..m {
                        v[j] += tx.at(i, j);
                    }
                }
                if mean {
                    v.iter_mut().for_each(|e| *e /= n as f64);
                }
                (v, vec![m])
            }
            Some(_) => {
                let mut v = vec![0.0; n];
                for i in 0..n {
                    for j in 0..m {
                        v[i] += tx.at(i, j);
                    }
                }
                if mean {
                    v.iter_mut().for_each(|e| *e /= m as f64);
                }
                (v, vec![n])
            }
        };
        let rg = self.any_grad(&[x]);
        let op = if mean {
            Op::ReduceMean(x, axis)
        } else {
            Op::ReduceSum(x, axis)
        };
        self.push_checked(out, &shape, rg, op, op_name)
    }

    /// Sum over all elements (`axis = None`) or along one axis.
    pub fn reduce_sum(&mut self, x: NodeId, axis: Option<usize>) -> Result<NodeId, DiffError> {
        self.reduce(x, axis, false)
    }

    /// Mean over all elements (`axis = None`) or along one axis.
    pub fn reduce_mean(&mut self, x: NodeId, axis: Option<usize>) -> Result<NodeId, DiffError> {
        self.reduce(x, axis, true)
    }

    // ---- backward -----------------------------------------------------

    /// Reverse sweep from a scalar loss. Leaf gradients become available
    /// through [`Graph::grad`] and [`Graph::grads`]. A graph can only be
    /// differentiated once.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), DiffError> {
        if self.backward_run {
            return Err(DiffError::BackwardTwice);
        }
        let numel = self.nodes[loss.0].tensor.numel();
        if numel != 1 {
            return Err(DiffError::NonScalarLoss { numel });
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].tensor.requires_grad() {
                continue;
            }
            let op = self.nodes[id].op.clone();
            if let Op::Leaf = op {
                self.nodes[id].tensor.set_grad(g);
                continue;
            }
            self.propagate(&op, id, &g, &mut grads);
        }
        self.backward_run = true;
        Ok(())
    }

    fn accum(&self, grads: &mut [Option<Vec<f64>>], id: NodeId, contrib: Vec<f64>) {
        if !self.nodes[id.0].tensor.requires_grad() {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contrib) {
                    *gi += ci;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn propagate(&self, op: &Op, out: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |id: NodeId| self.nodes[id.0].tensor.data();
        let out_t = &self.nodes[out].tensor;
        match *op {
            Op::Leaf => unreachable!("handled by caller"),
            Op::Matmul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].tensor, &self.nodes[b.0].tensor);
                let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
                // dA = G · Bᵀ
                let mut da = vec![0.0; n * k];
                for i in 0..n {
                    for l in 0..k {
                        let mut s = 0.0;
                        for j in 0..m {
                            s += g[i * m + j] * tb.at(l, j);
                        }
                        da[i * k + l] = s;
                    }
                }
                // dB = Aᵀ · G
                let mut db = vec![0.0; k * m];
                for l in 0..k {
                    for j in 0..m {
                        let mut s = 0.0;
                        for i in 0..n {
                            s += ta.at(i, l) * g[i * m + j];
                        }
                        db[l * m + j] = s;
                    }
                }
                self.accum(grads, a, da);
                self.accum(grads, b, db);
            }
            Op::Transpose(x) => {
                let (m, n) = (out_t.rows(), out_t.cols());
                let mut dx = vec![0.0; n * m];
                for i in 0..m {
                    for j in 0..n {
                        dx[j * m + i] = g[i * n + j];
                    }
                }
                self.accum(grads, x, dx);
            }
            Op::Add(a, b) => {
                self.accum(grads, a, g.to_vec());
                self.accum(grads, b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accum(grads, a, g.to_vec());
                self.accum(grads, b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (da_src, db_src) = (val(b), val(a));
                self.accum(
                    grads,
                    a,
                    g.iter().zip(da_src).map(|(gi, bi)| gi * bi).collect(),
                );
                self.accum(
                    grads,
                    b,
                    g.iter().zip(db_src).map(|(gi, ai)| gi * ai).collect(),
                );
            }
            Op::Div(a, b) => {
                let (bv, yv) = (val(b), out_t.data());
                self.accum(
                    grads,
                    a,
                    g.iter().zip(bv).map(|(gi, bi)| gi / bi).collect(),
                );
                self.accum(
                    grads,
                    b,
                    g.iter()
                        .zip(yv.iter().zip(bv))
                        .map(|(gi, (yi, bi))| -gi * yi / bi)
                        .collect(),
                );
            }
            Op::AddBias(x, b) => {
                let tx = &self.nodes[x.0].tensor;
                let (n, m) = (tx.rows(), tx.cols());
                self.accum(grads, x, g.to_vec());
                let mut db = vec![0.0; m];
                for i in 0..n {
                    for j in 0..m {
                        db[j] += g[i * m + j];
                    }
                }
                self.accum(grads, b, db);
            }
            Op::ScaleRows(x, c) => {
                let (tx, tc) = (&self.nodes[x.0].tensor, &self.nodes[c.0].tensor);
                let (n, m) = (tx.rows(), tx.cols());
                let mut dx = vec![0.0; n * m];
                let mut dc = vec![0.0; n];
                for i in 0..n {
                    let ci = tc.data()[i];
                    for j in 0..m {
                        dx[i * m + j] = g[i * m + j] * ci;
                        dc[i] += g[i * m + j] * tx.at(i, j);
                    }
                }
                self.accum(grads, x, dx);
                self.accum(grads, c, dc);
            }
            Op::Affine(x, a) => {
                self.accum(grads, x, g.iter().map(|gi| gi * a).collect());
            }
            Op::Softmax(x) => {
                let y = out_t.data();
                let (n, m) = (out_t.rows(), out_t.cols());
                let mut dx = vec![0.0; n * m];
                for i in 0..n {
                    let yr = &y[i * m..(i + 1) * m];
                    let gr = &g[i * m..(i + 1) * m];
                    let dot: f64 = yr.iter().zip(gr).map(|(yi, gi)| yi * gi).sum();
                    for j in 0..m {
                        dx[i * m + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accum(grads, x, dx);
            }
            Op::LayerNorm(x, gain, bias) => {
                let tx = &self.nodes[x.0].tensor;
                let tg = &self.nodes[gain.0].tensor;
                let (n, m) = (tx.rows(), tx.cols());
                let mut dx = vec![0.0; n * m];
                let mut dgain = vec![0.0; m];
                let mut dbias = vec![0.0; m];
                for i in 0..n {
                    let row: Vec<f64> = (0..m).map(|j| tx.at(i, j)).collect();
                    let mean = row.iter().sum::<f64>() / m as f64;
                    let var =
                        row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
                    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                    let gr = &g[i * m..(i + 1) * m];
                    let dxhat: Vec<f64> =
                        gr.iter().zip(tg.data()).map(|(gi, gn)| gi * gn).collect();
                    let mean_dxhat = dxhat.iter().sum::<f64>() / m as f64;
                    let mean_dxhat_xhat = dxhat
                        .iter()
                        .zip(&xhat)
                        .map(|(d, h)| d * h)
                        .sum::<f64>()
                        / m as f64;
                    for j in 0..m {
                        dgain[j] += gr[j] * xhat[j];
                        dbias[j] += gr[j];
                        dx[i * m + j] =
                            inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                    }
                }
                self.accum(grads, x, dx);
                self.accum(grads, gain, dgain);
                self.accum(grads, bias, dbias);
            }
            Op::Gelu(x) => {
                let xv = val(x);
                self.accum(
                    grads,
                    x,
                    g.iter()
                        .zip(xv)
                        .map(|(gi, &v)| gi * special::gelu_prime(v))
                        .collect(),
                );
            }
            Op::Softplus(x) => {
                let xv = val(x);
                self.accum(
                    grads,
                    x,
                    g.iter()
                        .zip(xv)
                        .map(|(gi, &v)| gi * special::sigmoid(v))
                        .collect(),
                );
            }
            Op::Exp(x) => {
                let y = out_t.data();
                self.accum(
                    grads,
                    x,
                    g.iter().zip(y).map(|(gi, yi)| gi * yi).collect(),
                );
            }
            Op::Log(x) => {
                let xv = val(x);
                self.accum(
                    grads,
                    x,
                    g.iter().zip(xv).map(|(gi, xi)| gi / xi).collect(),
                );
            }
            Op::Lgamma(x) => {
                let xv = val(x);
                self.accum(
                    grads,
                    x,
                    g.iter()
                        .zip(xv)
                        .map(|(gi, &v)| gi * special::digamma(v))
                        .collect(),
                );
            }
            Op::Slice(x, axis, start, end) => {
                let tx = &self.nodes[x.0].tensor;
                let mut dx = vec![0.0; tx.numel()];
                if tx.rank() == 1 {
                    dx[start..end].copy_from_slice(g);
                } else {
                    let m = tx.cols();
                    if axis == 0 {
                        dx[start * m..end * m].copy_from_slice(g);
                    } else {
                        let w = end - start;
                        for i in 0..tx.rows() {
                            dx[i * m + start..i * m + end]
                                .copy_from_slice(&g[i * w..(i + 1) * w]);
                        }
                    }
                }
                self.accum(grads, x, dx);
            }
            Op::Concat(a, b, axis) => {
                let (ta, tb) = (&self.nodes[a.0].tensor, &self.nodes[b.0].tensor);
                if ta.rank() == 1 || axis == 0 {
                    let split = ta.numel();
                    self.accum(grads, a, g[..split].to_vec());
                    self.accum(grads, b, g[split..].to_vec());
                } else {
                    let (n, ma, mb) = (ta.rows(), ta.cols(), tb.cols());
                    let mut da = Vec::with_capacity(n * ma);
                    let mut db = Vec::with_capacity(n * mb);
                    for i in 0..n {
                        let row = &g[i * (ma + mb)..(i + 1) * (ma + mb)];
                        da.extend_from_slice(&row[..ma]);
                        db.extend_from_slice(&row[ma..]);
                    }
                    self.accum(grads, a, da);
                    self.accum(grads, b, db);
                }
            }
            Op::ReduceSum(x, axis) | Op::ReduceMean(x, axis) => {
                let mean = matches!(op, Op::ReduceMean(..));
                let tx = &self.nodes[x.0].tensor;
                let (n, m) = (tx.rows(), tx.cols());
                let mut dx = vec![0.0; tx.numel()];
                match axis {
                    None => {
                        let scale = if mean { 1.0 / tx.numel() as f64 } else { 1.0 };
                        dx.iter_mut().for_each(|v| *v = g[0] * scale);
                    }
                    Some(0) if tx.rank() == 1 => {
                        let scale = if mean { 1.0 / tx.numel() as f64 } else { 1.0 };
                        dx.iter_mut().for_each(|v| *v = g[0] * scale);
                    }
                    Some(0) => {
                        let scale = if mean { 1.0 / n as f64 } else { 1.0 };
                        for i in 0..n {
                            for j in 0..m {
                                dx[i * m + j] = g[j] * scale;
                            }
                        }
                    }
                    Some(_) => {
                        let scale = if mean { 1.0 / m as f64 } else { 1.0 };
                        for i in 0..n {
                            for j in 0..m {
                                dx[i * m + j] = g[i] * scale;
                            }
                        }
                    }
                }
                self.accum(grads, x, dx);
            }
        }
    }

    /// Gradients of all trainable named leaves, zero-filled when a leaf was
    /// never reached by the loss.
    pub fn grads(&self) -> BTreeMap<String, Vec<f64>> {
        let mut out = BTreeMap::new();
        for node in &self.nodes {
            if let (Some(name), Op::Leaf) = (&node.name, &node.op) {
                if node.tensor.requires_grad() {
                    let g = node
                        .tensor
                        .grad()
                        .map(|g| g.to_vec())
                        .unwrap_or_else(|| vec![0.0; node.tensor.numel()]);
                    out.insert(name.clone(), g);
                }
            }
        }
        out
    }
}
