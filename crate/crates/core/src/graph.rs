//! Define-by-run reverse-mode automatic differentiation.
//!
//! Operations execute eagerly as they are recorded; the node list is the
//! Wengert tape, so creation order is already a topological order and the
//! backward pass visits each node exactly once in reverse. Forward values
//! are checked for NaN/Inf as they are produced and errors name the node.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels::{gemm, gemm_abt, gemm_atb};
use crate::rope::RotationTable;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

#[derive(Clone, Debug)]
enum Op {
    Param,
    Input,
    Const,
    MatMul,
    Add,
    Mul,
    /// [n,d] + [1,d], bias broadcast over rows.
    AddRow,
    /// [n,d] * [1,d], gate broadcast over rows.
    MulRow,
    Scale(f32),
    Reshape { from: Vec<usize> },
    Transpose,
    Softmax,
    RmsNorm { eps: f32 },
    Silu,
    Gelu,
    /// Mean squared error over all elements; scalar output.
    Mse,
    /// Row gather from an embedding table.
    Embed { indices: Vec<usize> },
    ConcatRows { row_counts: Vec<usize> },
    SliceRows { start: usize, len: usize },
    SliceCols { start: usize, len: usize },
    /// Rotary transform of per-head channel pairs by a fixed angle table.
    Rope { table: Arc<RotationTable> },
    /// Full bidirectional multi-head attention over one sequence.
    Attention { heads: usize },
}

#[derive(Clone, Debug)]
enum Saved {
    None,
    /// Per-row 1/rms factors (RmsNorm).
    RowScales(Vec<f32>),
    /// Softmax probabilities per head, heads * n * n (Attention).
    Probs(Vec<f32>),
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Arc<Tensor>,
    saved: Saved,
    requires_grad: bool,
    name: Option<String>,
}

/// Gradients produced by [`Graph::backward`], indexed by node id.
pub struct GradMap {
    grads: Vec<Option<Tensor>>,
}

impl GradMap {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn node_label(&self, id: NodeId) -> String {
        self.describe(id.0)
    }

    fn describe(&self, idx: usize) -> String {
        let node = &self.nodes[idx];
        match &node.name {
            Some(n) => format!("node {idx} ({:?} `{n}`)", node.op_kind()),
            None => format!("node {idx} ({:?})", node.op_kind()),
        }
    }

    // ── Leaves ──────────────────────────────────────────────────────────

    pub fn param(&mut self, name: &str, value: Arc<Tensor>) -> NodeId {
        self.push_leaf(Op::Param, value, true, Some(name.to_string()))
    }

    pub fn input(&mut self, name: &str, value: Tensor) -> NodeId {
        self.push_leaf(Op::Input, Arc::new(value), false, Some(name.to_string()))
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(Op::Const, Arc::new(value), false, None)
    }

    /// Leaf that participates in gradient computation without being a model
    /// parameter (used by gradient checks on intermediate inputs).
    pub fn variable(&mut self, name: &str, value: Tensor) -> NodeId {
        self.push_leaf(Op::Input, Arc::new(value), true, Some(name.to_string()))
    }

    fn push_leaf(&mut self, op: Op, value: Arc<Tensor>, requires_grad: bool, name: Option<String>) -> NodeId {
        self.nodes.push(Node { op, inputs: vec![], value, saved: Saved::None, requires_grad, name });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor, saved: Saved) -> Result<NodeId> {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node { op, inputs, value: Arc::new(value), saved, requires_grad, name: None });
        let id = NodeId(self.nodes.len() - 1);
        if !self.nodes[id.0].value.all_finite() {
            return Err(Error::NonFinite { node: self.describe(id.0) });
        }
        Ok(id)
    }

    fn shape_err(&self, op: &str, details: String) -> Error {
        Error::ShapeMismatch { node: format!("{op} (node {})", self.nodes.len()), details }
    }

    // ── Operations ──────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if !va.is_2d() || !vb.is_2d() || va.cols() != vb.rows() {
            return Err(self.shape_err(
                "matmul",
                format!("{:?} x {:?}", va.shape(), vb.shape()),
            ));
        }
        let (m, k, n) = (va.rows(), va.cols(), vb.cols());
        let mut out = Tensor::zeros(vec![m, n]);
        gemm(out.data_mut(), n, va.data(), k, vb.data(), n, m, k, n, false);
        self.push(Op::MatMul, vec![a, b], out, Saved::None)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(self.shape_err("add", format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.push(Op::Add, vec![a, b], out, Saved::None)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(self.shape_err("mul", format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.push(Op::Mul, vec![a, b], out, Saved::None)
    }

    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (vx, vb) = (self.value(x), self.value(bias));
        if vb.numel() != vx.cols() {
            return Err(self.shape_err(
                "add_row",
                format!("{:?} + row {:?}", vx.shape(), vb.shape()),
            ));
        }
        let d = vx.cols();
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(d) {
            for (v, b) in row.iter_mut().zip(vb.data()) {
                *v += b;
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        self.push(Op::AddRow, vec![x, bias], out, Saved::None)
    }

    pub fn mul_row(&mut self, x: NodeId, gate: NodeId) -> Result<NodeId> {
        let (vx, vg) = (self.value(x), self.value(gate));
        if vg.numel() != vx.cols() {
            return Err(self.shape_err(
                "mul_row",
                format!("{:?} * row {:?}", vx.shape(), vg.shape()),
            ));
        }
        let d = vx.cols();
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(d) {
            for (v, g) in row.iter_mut().zip(vg.data()) {
                *v *= g;
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        self.push(Op::MulRow, vec![x, gate], out, Saved::None)
    }

    pub fn scale(&mut self, x: NodeId, factor: f32) -> Result<NodeId> {
        let out = self.value(x).map(|v| v * factor);
        self.push(Op::Scale(factor), vec![x], out, Saved::None)
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let vx = self.value(x);
        let numel: usize = shape.iter().product();
        if numel != vx.numel() {
            return Err(self.shape_err(
                "reshape",
                format!("{:?} -> {:?}", vx.shape(), shape),
            ));
        }
        let from = vx.shape().to_vec();
        let out = Tensor::new(shape, vx.data().to_vec())?;
        self.push(Op::Reshape { from }, vec![x], out, Saved::None)
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        if !vx.is_2d() {
            return Err(self.shape_err("transpose", format!("{:?} is not 2D", vx.shape())));
        }
        let (m, n) = (vx.rows(), vx.cols());
        let mut data = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = vx.data()[i * n + j];
            }
        }
        let out = Tensor::new(vec![n, m], data)?;
        self.push(Op::Transpose, vec![x], out, Saved::None)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        let d = vx.cols();
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(d) {
            softmax_row(row);
        }
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        self.push(Op::Softmax, vec![x], out, Saved::None)
    }

    /// RMS normalization over the last axis followed by a learned gain.
    pub fn rms_norm(&mut self, x: NodeId, gain: NodeId) -> Result<NodeId> {
        let eps = 1e-6f32;
        let (vx, vg) = (self.value(x), self.value(gain));
        let d = vx.cols();
        if vg.numel() != d {
            return Err(self.shape_err(
                "rms_norm",
                format!("{:?} with gain {:?}", vx.shape(), vg.shape()),
            ));
        }
        let rows = vx.numel() / d;
        let mut data = vec![0.0f32; vx.numel()];
        let mut inv_rms = vec![0.0f32; rows];
        for (r, (src, dst)) in vx.data().chunks(d).zip(data.chunks_mut(d)).enumerate() {
            let ms: f32 = src.iter().map(|v| v * v).sum::<f32>() / d as f32;
            let inv = 1.0 / (ms + eps).sqrt();
            inv_rms[r] = inv;
            for ((y, &x), &g) in dst.iter_mut().zip(src).zip(vg.data()) {
                *y = x * inv * g;
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        self.push(Op::RmsNorm { eps }, vec![x, gain], out, Saved::RowScales(inv_rms))
    }

    pub fn silu(&mut self, x: NodeId) -> Result<NodeId> {
        let out = self.value(x).map(|v| v * sigmoid(v));
        self.push(Op::Silu, vec![x], out, Saved::None)
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let out = self.value(x).map(gelu_tanh);
        self.push(Op::Gelu, vec![x], out, Saved::None)
    }

    /// Mean squared error over all elements; returns a scalar node.
    pub fn mse(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        let (vp, vt) = (self.value(pred), self.value(target));
        if vp.shape() != vt.shape() {
            return Err(self.shape_err("mse", format!("{:?} vs {:?}", vp.shape(), vt.shape())));
        }
        let n = vp.numel() as f64;
        let sum: f64 = vp
            .data()
            .iter()
            .zip(vt.data())
            .map(|(p, t)| {
                let d = (p - t) as f64;
                d * d
            })
            .sum();
        let out = Tensor::scalar((sum / n) as f32);
        self.push(Op::Mse, vec![pred, target], out, Saved::None)
    }

    /// Gather rows of an embedding table.
    pub fn embed(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId> {
        let vt = self.value(table);
        if !vt.is_2d() {
            return Err(self.shape_err("embed", format!("table {:?} is not 2D", vt.shape())));
        }
        let (rows, d) = (vt.rows(), vt.cols());
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::IndexOutOfRange { index: bad, table_len: rows });
        }
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(&vt.data()[i * d..(i + 1) * d]);
        }
        let out = Tensor::new(vec![indices.len(), d], data)?;
        self.push(Op::Embed { indices: indices.to_vec() }, vec![table], out, Saved::None)
    }

    /// Concatenate 2D tensors along the row (token) axis.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(self.shape_err("concat_rows", "no inputs".into()));
        }
        let d = self.value(parts[0]).cols();
        let mut row_counts = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if !v.is_2d() || v.cols() != d {
                return Err(self.shape_err(
                    "concat_rows",
                    format!("expected [*, {d}], got {:?}", v.shape()),
                ));
            }
            row_counts.push(v.rows());
            data.extend_from_slice(v.data());
        }
        let rows = row_counts.iter().sum();
        let out = Tensor::new(vec![rows, d], data)?;
        self.push(Op::ConcatRows { row_counts }, parts.to_vec(), out, Saved::None)
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let vx = self.value(x);
        if !vx.is_2d() || start + len > vx.rows() || len == 0 {
            return Err(self.shape_err(
                "slice_rows",
                format!("rows {start}..{} of {:?}", start + len, vx.shape()),
            ));
        }
        let d = vx.cols();
        let data = vx.data()[start * d..(start + len) * d].to_vec();
        let out = Tensor::new(vec![len, d], data)?;
        self.push(Op::SliceRows { start, len }, vec![x], out, Saved::None)
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let vx = self.value(x);
        if !vx.is_2d() || start + len > vx.cols() || len == 0 {
            return Err(self.shape_err(
                "slice_cols",
                format!("cols {start}..{} of {:?}", start + len, vx.shape()),
            ));
        }
        let (rows, d) = (vx.rows(), vx.cols());
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&vx.data()[r * d + start..r * d + start + len]);
        }
        let out = Tensor::new(vec![rows, len], data)?;
        self.push(Op::SliceCols { start, len }, vec![x], out, Saved::None)
    }

    /// Apply the rotary table to every head of `x` ([n, heads*table.head_dim]).
    pub fn rope(&mut self, x: NodeId, table: Arc<RotationTable>) -> Result<NodeId> {
        let vx = self.value(x);
        let d = vx.cols();
        if !vx.is_2d() || vx.rows() != table.tokens() || d % table.head_dim() != 0 {
            return Err(self.shape_err(
                "rope",
                format!(
                    "{:?} with table for {} tokens, head_dim {}",
                    vx.shape(),
                    table.tokens(),
                    table.head_dim()
                ),
            ));
        }
        let mut data = vx.data().to_vec();
        table.rotate(&mut data, d, false);
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        self.push(Op::Rope { table }, vec![x], out, Saved::None)
    }

    /// Full bidirectional multi-head attention; q/k/v are [n, d].
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize) -> Result<NodeId> {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let d = vq.cols();
        if vq.shape() != vk.shape() || vq.shape() != vv.shape() || !vq.is_2d() {
            return Err(self.shape_err(
                "attention",
                format!("q {:?}, k {:?}, v {:?}", vq.shape(), vk.shape(), vv.shape()),
            ));
        }
        if heads == 0 || d % heads != 0 {
            return Err(self.shape_err("attention", format!("dim {d} not divisible into {heads} heads")));
        }
        let n = vq.rows();
        let hd = d / heads;
        let scale = 1.0 / (hd as f32).sqrt();

        let mut out = vec![0.0f32; n * d];
        let mut probs = vec![0.0f32; heads * n * n];
        let mut kt = vec![0.0f32; n * hd];
        for h in 0..heads {
            let off = h * hd;
            // K_h^T so scores use the fast non-transposed kernel.
            for i in 0..n {
                for c in 0..hd {
                    kt[c * n + i] = vk.data()[i * d + off + c];
                }
            }
            let p = &mut probs[h * n * n..(h + 1) * n * n];
            gemm(p, n, &vq.data()[off..], d, &kt, n, n, hd, n, false);
            for row in p.chunks_mut(n) {
                for s in row.iter_mut() {
                    *s *= scale;
                }
                softmax_row(row);
            }
            gemm(&mut out[off..], d, p, n, &vv.data()[off..], d, n, n, hd, false);
        }
        let out = Tensor::new(vec![n, d], out)?;
        self.push(Op::Attention { heads }, vec![q, k, v], out, Saved::Probs(probs))
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse-mode sweep from `output`; returns gradients for every node
    /// that requires grad (parameters and variables).
    pub fn backward(&mut self, output: NodeId) -> Result<GradMap> {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let seed = self.value(output);
        grads[output.0] = Some(Tensor::full(seed.shape().to_vec(), 1.0));

        for idx in (0..=output.0).rev() {
            if grads[idx].is_none() || !self.nodes[idx].requires_grad {
                continue;
            }
            let grad = grads[idx].take().unwrap();
            self.backprop_node(idx, &grad, &mut grads)?;
            if matches!(self.nodes[idx].op, Op::Param | Op::Input) {
                grads[idx] = Some(grad);
            }
        }
        Ok(GradMap { grads })
    }

    fn backprop_node(&self, idx: usize, grad: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        let needs: Vec<bool> = node.inputs.iter().map(|&i| self.nodes[i.0].requires_grad).collect();
        let mut add_to = |slot: usize, contribution: Tensor, grads: &mut [Option<Tensor>]| {
            let target = node.inputs[slot].0;
            match &mut grads[target] {
                Some(existing) => {
                    for (e, c) in existing.data_mut().iter_mut().zip(contribution.data()) {
                        *e += c;
                    }
                }
                slot_ref => *slot_ref = Some(contribution),
            }
        };

        match &node.op {
            Op::Param | Op::Input | Op::Const => {}

            Op::MatMul => {
                let va = self.value(node.inputs[0]);
                let vb = self.value(node.inputs[1]);
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                if needs[0] {
                    // dA = dC * B^T
                    let mut da = Tensor::zeros(vec![m, k]);
                    let mut bt = vec![0.0f32; n * k];
                    for p in 0..k {
                        for j in 0..n {
                            bt[j * k + p] = vb.data()[p * n + j];
                        }
                    }
                    gemm(da.data_mut(), k, grad.data(), n, &bt, k, m, n, k, false);
                    add_to(0, da, grads);
                }
                if needs[1] {
                    // dB = A^T * dC
                    let mut db = Tensor::zeros(vec![k, n]);
                    gemm_atb(db.data_mut(), n, va.data(), k, grad.data(), n, m, k, n, false);
                    add_to(1, db, grads);
                }
            }

            Op::Add => {
                if needs[0] {
                    add_to(0, grad.clone(), grads);
                }
                if needs[1] {
                    add_to(1, grad.clone(), grads);
                }
            }

            Op::Mul => {
                let va = self.value(node.inputs[0]);
                let vb = self.value(node.inputs[1]);
                if needs[0] {
                    let data = grad.data().iter().zip(vb.data()).map(|(g, b)| g * b).collect();
                    add_to(0, Tensor::new(va.shape().to_vec(), data)?, grads);
                }
                if needs[1] {
                    let data = grad.data().iter().zip(va.data()).map(|(g, a)| g * a).collect();
                    add_to(1, Tensor::new(vb.shape().to_vec(), data)?, grads);
                }
            }

            Op::AddRow => {
                let vb = self.value(node.inputs[1]);
                if needs[0] {
                    add_to(0, grad.clone(), grads);
                }
                if needs[1] {
                    let d = vb.numel();
                    let mut db = vec![0.0f32; d];
                    for row in grad.data().chunks(d) {
                        for (acc, g) in db.iter_mut().zip(row) {
                            *acc += g;
                        }
                    }
                    add_to(1, Tensor::new(vb.shape().to_vec(), db)?, grads);
                }
            }

            Op::MulRow => {
                let vx = self.value(node.inputs[0]);
                let vg = self.value(node.inputs[1]);
                let d = vg.numel();
                if needs[0] {
                    let mut dx = grad.data().to_vec();
                    for row in dx.chunks_mut(d) {
                        for (v, g) in row.iter_mut().zip(vg.data()) {
                            *v *= g;
                        }
                    }
                    add_to(0, Tensor::new(vx.shape().to_vec(), dx)?, grads);
                }
                if needs[1] {
                    let mut dg = vec![0.0f32; d];
                    for (grow, xrow) in grad.data().chunks(d).zip(vx.data().chunks(d)) {
                        for ((acc, g), x) in dg.iter_mut().zip(grow).zip(xrow) {
                            *acc += g * x;
                        }
                    }
                    add_to(1, Tensor::new(vg.shape().to_vec(), dg)?, grads);
                }
            }

            Op::Scale(factor) => {
                if needs[0] {
                    add_to(0, grad.map(|g| g * factor), grads);
                }
            }

            Op::Reshape { from } => {
                if needs[0] {
                    add_to(0, Tensor::new(from.clone(), grad.data().to_vec())?, grads);
                }
            }

            Op::Transpose => {
                if needs[0] {
                    let (m, n) = (grad.rows(), grad.cols());
                    let mut data = vec![0.0f32; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            data[j * m + i] = grad.data()[i * n + j];
                        }
                    }
                    add_to(0, Tensor::new(vec![n, m], data)?, grads);
                }
            }

            Op::Softmax => {
                if needs[0] {
                    let y = self.value(NodeId(idx));
                    let d = y.cols();
                    let mut dx = vec![0.0f32; y.numel()];
                    for ((yr, gr), dr) in
                        y.data().chunks(d).zip(grad.data().chunks(d)).zip(dx.chunks_mut(d))
                    {
                        let dot: f32 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for ((d, &y), &g) in dr.iter_mut().zip(yr).zip(gr) {
                            *d = y * (g - dot);
                        }
                    }
                    add_to(0, Tensor::new(y.shape().to_vec(), dx)?, grads);
                }
            }

            Op::RmsNorm { .. } => {
                let vx = self.value(node.inputs[0]);
                let vg = self.value(node.inputs[1]);
                let d = vx.cols();
                let inv_rms = match &node.saved {
                    Saved::RowScales(v) => v,
                    _ => unreachable!("rms_norm saves row scales"),
                };
                if needs[0] {
                    let mut dx = vec![0.0f32; vx.numel()];
                    for (r, ((xr, gr), dr)) in vx
                        .data()
                        .chunks(d)
                        .zip(grad.data().chunks(d))
                        .zip(dx.chunks_mut(d))
                        .enumerate()
                    {
                        let inv = inv_rms[r];
                        // y_j = g_j * x_j * inv; inv depends on all x.
                        let mut dot = 0.0f32; // sum_j dy_j * g_j * x_j
                        for ((&g, &x), &gain) in gr.iter().zip(xr).zip(vg.data()) {
                            dot += g * gain * x;
                        }
                        let factor = dot * inv * inv / d as f32;
                        for (((dst, &g), &x), &gain) in
                            dr.iter_mut().zip(gr).zip(xr).zip(vg.data())
                        {
                            *dst = inv * (g * gain - x * factor);
                        }
                    }
                    add_to(0, Tensor::new(vx.shape().to_vec(), dx)?, grads);
                }
                if needs[1] {
                    let mut dg = vec![0.0f32; d];
                    for (r, (xr, gr)) in vx.data().chunks(d).zip(grad.data().chunks(d)).enumerate() {
                        let inv = inv_rms[r];
                        for ((acc, &x), &g) in dg.iter_mut().zip(xr).zip(gr) {
                            *acc += g * x * inv;
                        }
                    }
                    add_to(1, Tensor::new(vg.shape().to_vec(), dg)?, grads);
                }
            }

            Op::Silu => {
                if needs[0] {
                    let vx = self.value(node.inputs[0]);
                    let data = grad
                        .data()
                        .iter()
                        .zip(vx.data())
                        .map(|(g, &x)| {
                            let s = sigmoid(x);
                            g * (s * (1.0 + x * (1.0 - s)))
                        })
                        .collect();
                    add_to(0, Tensor::new(vx.shape().to_vec(), data)?, grads);
                }
            }

            Op::Gelu => {
                if needs[0] {
                    let vx = self.value(node.inputs[0]);
                    let data = grad
                        .data()
                        .iter()
                        .zip(vx.data())
                        .map(|(g, &x)| g * gelu_tanh_deriv(x))
                        .collect();
                    add_to(0, Tensor::new(vx.shape().to_vec(), data)?, grads);
                }
            }

            Op::Mse => {
                let vp = self.value(node.inputs[0]);
                let vt = self.value(node.inputs[1]);
                let g = grad.item() * 2.0 / vp.numel() as f32;
                if needs[0] {
                    let data = vp.data().iter().zip(vt.data()).map(|(p, t)| g * (p - t)).collect();
                    add_to(0, Tensor::new(vp.shape().to_vec(), data)?, grads);
                }
                if needs[1] {
                    let data = vp.data().iter().zip(vt.data()).map(|(p, t)| -g * (p - t)).collect();
                    add_to(1, Tensor::new(vt.shape().to_vec(), data)?, grads);
                }
            }

            Op::Embed { indices } => {
                if needs[0] {
                    let vt = self.value(node.inputs[0]);
                    let d = vt.cols();
                    let mut dt = Tensor::zeros(vt.shape().to_vec());
                    for (pos, &row) in indices.iter().enumerate() {
                        let src = &grad.data()[pos * d..(pos + 1) * d];
                        let dst = &mut dt.data_mut()[row * d..(row + 1) * d];
                        for (a, b) in dst.iter_mut().zip(src) {
                            *a += b;
                        }
                    }
                    add_to(0, dt, grads);
                }
            }

            Op::ConcatRows { row_counts } => {
                let d = grad.cols();
                let mut start = 0;
                for (slot, &rows) in row_counts.iter().enumerate() {
                    if needs[slot] {
                        let data = grad.data()[start * d..(start + rows) * d].to_vec();
                        add_to(slot, Tensor::new(vec![rows, d], data)?, grads);
                    }
                    start += rows;
                }
            }

            Op::SliceRows { start, len } => {
                if needs[0] {
                    let vx = self.value(node.inputs[0]);
                    let d = vx.cols();
                    let mut dx = Tensor::zeros(vx.shape().to_vec());
                    dx.data_mut()[start * d..(start + len) * d].copy_from_slice(grad.data());
                    add_to(0, dx, grads);
                }
            }

            Op::SliceCols { start, len } => {
                if needs[0] {
                    let vx = self.value(node.inputs[0]);
                    let (rows, d) = (vx.rows(), vx.cols());
                    let mut dx = Tensor::zeros(vx.shape().to_vec());
                    for r in 0..rows {
                        dx.data_mut()[r * d + start..r * d + start + len]
                            .copy_from_slice(&grad.data()[r * len..(r + 1) * len]);
                    }
                    add_to(0, dx, grads);
                }
            }

            Op::Rope { table } => {
                if needs[0] {
                    // Inverse rotation (by -angle) transposes the operator.
                    let mut data = grad.data().to_vec();
                    table.rotate(&mut data, grad.cols(), true);
                    add_to(0, Tensor::new(grad.shape().to_vec(), data)?, grads);
                }
            }

            Op::Attention { heads } => {
                let vq = self.value(node.inputs[0]);
                let vk = self.value(node.inputs[1]);
                let vv = self.value(node.inputs[2]);
                let probs = match &node.saved {
                    Saved::Probs(p) => p,
                    _ => unreachable!("attention saves probabilities"),
                };
                let (n, d) = (vq.rows(), vq.cols());
                let hd = d / heads;
                let scale = 1.0 / (hd as f32).sqrt();

                let mut dq = Tensor::zeros(vec![n, d]);
                let mut dk = Tensor::zeros(vec![n, d]);
                let mut dv = Tensor::zeros(vec![n, d]);
                let mut dp = vec![0.0f32; n * n];
                let mut vt = vec![0.0f32; hd * n];
                for h in 0..*heads {
                    let off = h * hd;
                    let p = &probs[h * n * n..(h + 1) * n * n];
                    // dV_h = P^T dO_h
                    gemm_atb(&mut dv.data_mut()[off..], d, p, n, &grad.data()[off..], d, n, n, hd, false);
                    // dP = dO_h V_h^T (V transposed once for the fast kernel)
                    for i in 0..n {
                        for c in 0..hd {
                            vt[c * n + i] = vv.data()[i * d + off + c];
                        }
                    }
                    gemm_abt(&mut dp, n, &grad.data()[off..], d, &vt, n, n, hd, n, false);
                    // dS = scale * P ⊙ (dP - rowsum(dP ⊙ P))
                    for (pr, dpr) in p.chunks(n).zip(dp.chunks_mut(n)) {
                        let dot: f32 = pr.iter().zip(dpr.iter()).map(|(p, g)| p * g).sum();
                        for (g, &pv) in dpr.iter_mut().zip(pr) {
                            *g = scale * pv * (*g - dot);
                        }
                    }
                    // dQ_h = dS K_h ; dK_h = dS^T Q_h
                    gemm(&mut dq.data_mut()[off..], d, &dp, n, &vk.data()[off..], d, n, n, hd, false);
                    gemm_atb(&mut dk.data_mut()[off..], d, &dp, n, &vq.data()[off..], d, n, n, hd, false);
                }
                if needs[0] {
                    add_to(0, dq, grads);
                }
                if needs[1] {
                    add_to(1, dk, grads);
                }
                if needs[2] {
                    add_to(2, dv, grads);
                }
            }
        }
        Ok(())
    }
}

impl Node {
    fn op_kind(&self) -> &'static str {
        match self.op {
            Op::Param => "param",
            Op::Input => "input",
            Op::Const => "const",
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::AddRow => "add_row",
            Op::MulRow => "mul_row",
            Op::Scale(_) => "scale",
            Op::Reshape { .. } => "reshape",
            Op::Transpose => "transpose",
            Op::Softmax => "softmax",
            Op::RmsNorm { .. } => "rms_norm",
            Op::Silu => "silu",
            Op::Gelu => "gelu",
            Op::Mse => "mse",
            Op::Embed { .. } => "embed",
            Op::ConcatRows { .. } => "concat_rows",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::Rope { .. } => "rope",
            Op::Attention { .. } => "attention",
        }
    }
}

#[inline]
fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

fn gelu_tanh(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_tanh_deriv(x: f32) -> f32 {
    const C: f32 = 0.797_884_6;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub(crate) fn softmax_row(row: &mut [f32]) {
    let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rope::{PosId3, RotationTable, Scheme, SchemeConfig};

    #[test]
    fn square_function_value_and_grad() {
        let mut g = Graph::new();
        let x = g.variable("x", Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        assert_eq!(g.value(y).item(), 9.0);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn matmul_checks_shapes_and_names_node() {
        let mut g = Graph::new();
        let a = g.input("a", Tensor::zeros(vec![2, 3]));
        let b = g.input("b", Tensor::zeros(vec![4, 2]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul"), "{msg}");
        assert!(msg.contains("shape mismatch"), "{msg}");
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut g = Graph::new();
        let x = g.input("x", Tensor::scalar(1e30));
        let sq = g.mul(x, x).unwrap(); // 1e60 overflows f32
        let err = g.mul(sq, sq).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }), "{err}");
    }

    #[test]
    fn forward_is_pure_bitwise() {
        let build = || {
            let mut g = Graph::new();
            let x = g.input("x", Tensor::new(vec![2, 4], (0..8).map(|i| 0.3 * i as f32).collect()).unwrap());
            let w = g.input("w", Tensor::new(vec![4, 4], (0..16).map(|i| 0.1 * i as f32 - 0.7).collect()).unwrap());
            let h = g.matmul(x, w).unwrap();
            let s = g.softmax(h).unwrap();
            let y = g.silu(s).unwrap();
            g.value(y).data().to_vec()
        };
        let a = build();
        let b = build();
        assert_eq!(a, b);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let x = g.input("x", Tensor::new(vec![3, 5], (0..15).map(|i| (i as f32).sin() * 4.0).collect()).unwrap());
        let s = g.softmax(x).unwrap();
        for row in g.value(s).data().chunks(5) {
            let sum: f32 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6, "row sum {sum}");
        }
    }

    #[test]
    fn rms_norm_rows_have_unit_rms() {
        let mut g = Graph::new();
        let x = g.input("x", Tensor::new(vec![4, 8], (0..32).map(|i| (i as f32 * 0.71).cos() * 3.0).collect()).unwrap());
        let gain = g.input("gain", Tensor::full(vec![1, 8], 1.0));
        let y = g.rms_norm(x, gain).unwrap();
        for row in g.value(y).data().chunks(8) {
            let rms = (row.iter().map(|v| v * v).sum::<f32>() / 8.0).sqrt();
            assert!((rms - 1.0).abs() < 1e-5, "row rms {rms}");
        }
    }

    #[test]
    fn concat_slice_roundtrip_and_grads() {
        let mut g = Graph::new();
        let a = g.variable("a", Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let b = g.variable("b", Tensor::new(vec![1, 3], vec![7., 8., 9.]).unwrap());
        let cat = g.concat_rows(&[a, b]).unwrap();
        assert_eq!(g.value(cat).shape(), &[3, 3]);
        let back = g.slice_rows(cat, 2, 1).unwrap();
        assert_eq!(g.value(back).data(), &[7., 8., 9.]);
        let t = g.constant(Tensor::zeros(vec![1, 3]));
        let loss = g.mse(back, t).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(a).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(grads.get(b).unwrap().data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn embed_gathers_and_scatters() {
        let mut g = Graph::new();
        let table = g.variable("table", Tensor::new(vec![3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let rows = g.embed(table, &[2, 0, 2]).unwrap();
        assert_eq!(g.value(rows).data(), &[5., 6., 1., 2., 5., 6.]);
        let target = g.constant(Tensor::zeros(vec![3, 2]));
        let loss = g.mse(rows, target).unwrap();
        let grads = g.backward(loss).unwrap();
        let dt = grads.get(table).unwrap();
        // Row 2 was used twice, row 1 never.
        assert_eq!(dt.data()[2], 0.0);
        assert_eq!(dt.data()[3], 0.0);
        assert!(dt.data()[4].abs() > dt.data()[0].abs());
        let err = g.embed(table, &[3]).unwrap_err();
        assert!(matches!(err, Error::IndexOutOfRange { index: 3, table_len: 3 }));
    }

    #[test]
    fn attention_rows_mix_values() {
        let mut g = Graph::new();
        let n = 4;
        let d = 8;
        let q = g.input("q", Tensor::zeros(vec![n, d]));
        let k = g.input("k", Tensor::zeros(vec![n, d]));
        let vals: Vec<f32> = (0..n * d).map(|i| i as f32).collect();
        let v = g.input("v", Tensor::new(vec![n, d], vals.clone()).unwrap());
        let out = g.attention(q, k, v, 2).unwrap();
        // Zero scores -> uniform probabilities -> every row is the column mean.
        for (j, col_mean) in (0..d)
            .map(|j| (0..n).map(|i| vals[i * d + j]).sum::<f32>() / n as f32)
            .enumerate()
        {
            for i in 0..n {
                assert!((g.value(out).data()[i * d + j] - col_mean).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn rope_graph_op_matches_standalone() {
        let cfg = SchemeConfig::new(Scheme::OmniRope);
        let pids = vec![PosId3::new(1, 2, 3), PosId3::new(0, 0, 0)];
        let x = Tensor::new(vec![2, 16], (0..32).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap();
        let standalone = crate::rope::apply_rotary(&x, &pids, &cfg, 16).unwrap();
        let mut g = Graph::new();
        let xin = g.input("x", x);
        let table = std::sync::Arc::new(RotationTable::build(&pids, 16, &cfg).unwrap());
        let y = g.rope(xin, table).unwrap();
        assert_eq!(g.value(y).data(), standalone.data());
    }
}
