use std::collections::BTreeMap;

use super::kernels::{gelu_tanh, gelu_tanh_grad, gemm, Operand};
use super::tensor::{NodeId, Tensor};
use super::AutodiffError;

/// Floor applied to `log` inputs.
pub const LOG_EPS: f64 = 1e-12;
/// Lower bound on the norm used by `l2_normalize` and `cosine_similarity`.
pub const NORM_EPS: f64 = 1e-8;
/// Variance epsilon used by `layer_norm`.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// How the right operand of an elementwise binary op is broadcast.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    Scalar,
    /// Right operand has `last_dim` elements, repeated over the outer rows.
    Row,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId, Broadcast),
    Sub(NodeId, NodeId, Broadcast),
    Mul(NodeId, NodeId, Broadcast),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    ConcatRows(Vec<NodeId>),
    SliceRows(NodeId, usize),
    ConcatCols(Vec<NodeId>),
    SliceCols(NodeId, usize),
    Sum(NodeId),
    Mean(NodeId),
    Scale(NodeId, f64),
    Gelu(NodeId),
    LayerNorm { input: NodeId, inv_std: Vec<f64> },
    Softmax(NodeId),
    Log(NodeId),
    Exp(NodeId),
    L2Normalize { input: NodeId, norms: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    trainable: bool,
}

/// Append-only record of primitive operations.
///
/// Every op appends one node whose inputs are already in the graph, so node
/// order is a topological order and backward is a single reverse sweep.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar sink with respect to the trainable leaves.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    by_node: BTreeMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, leaf: &Tensor) -> Option<&Tensor> {
        leaf.node().and_then(|id| self.by_node.get(&id))
    }

    pub fn get_node(&self, id: NodeId) -> Option<&Tensor> {
        self.by_node.get(&id)
    }

    pub fn len(&self) -> usize {
        self.by_node.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_node.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&NodeId, &Tensor)> {
        self.by_node.iter()
    }
}

fn mismatch(op: &'static str, lhs: &Tensor, rhs: &Tensor) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        lhs: lhs.shape().to_vec(),
        rhs: rhs.shape().to_vec(),
    }
}

fn require_2d(op: &'static str, t: &Tensor) -> Result<(), AutodiffError> {
    if t.shape().len() == 2 {
        Ok(())
    } else {
        Err(AutodiffError::RankMismatch {
            op,
            expected: 2,
            shape: t.shape().to_vec(),
        })
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

    /// Registers a leaf whose gradient `backward` reports.
    pub fn param(&mut self, value: &Tensor) -> Tensor {
        self.push_leaf(value, true)
    }

    /// Registers a leaf that receives no gradient.
    pub fn constant(&mut self, value: &Tensor) -> Tensor {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: &Tensor, trainable: bool) -> Tensor {
        let id = NodeId(self.nodes.len());
        let value = value.detached();
        self.nodes.push(Node {
            value: value.clone(),
            op: Op::Leaf,
            requires_grad: trainable,
            trainable,
        });
        value.with_node(id)
    }

    /// Node id of `t` in this graph, adding it as a constant when untracked.
    fn track(&mut self, t: &Tensor) -> Result<NodeId, AutodiffError> {
        match t.node() {
            Some(id) if id.0 < self.nodes.len() => Ok(id),
            Some(id) => Err(AutodiffError::UnknownNode(id.0)),
            None => Ok(self.constant(t).node().expect("leaf has a node")),
        }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[NodeId]) -> Tensor {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        let id = NodeId(self.nodes.len());
        let value = Tensor::from_parts(shape, data);
        self.nodes.push(Node {
            value: value.clone(),
            op,
            requires_grad,
            trainable: false,
        });
        value.with_node(id)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn broadcast_kind(
        op: &'static str,
        a: &Tensor,
        b: &Tensor,
    ) -> Result<Broadcast, AutodiffError> {
        if a.shape() == b.shape() {
            Ok(Broadcast::Same)
        } else if b.len() == 1 {
            Ok(Broadcast::Scalar)
        } else if b.len() == a.last_dim() && b.last_dim() == a.last_dim() && b.outer_rows() == 1 {
            Ok(Broadcast::Row)
        } else {
            Err(mismatch(op, a, b))
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: &Tensor,
        b: &Tensor,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(NodeId, NodeId, Broadcast) -> Op,
    ) -> Result<Tensor, AutodiffError> {
        let kind = Self::broadcast_kind(name, a, b)?;
        let ia = self.track(a)?;
        let ib = self.track(b)?;
        let (ad, bd) = (a.data(), b.data());
        let width = a.last_dim();
        let data: Vec<f64> = match kind {
            Broadcast::Same => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::Scalar => ad.iter().map(|&x| f(x, bd[0])).collect(),
            Broadcast::Row => ad
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, bd[i % width]))
                .collect(),
        };
        Ok(self.push(a.shape().to_vec(), data, make(ia, ib, kind), &[ia, ib]))
    }

    /// Elementwise sum; `b` may be a scalar or a row broadcast over `a`.
    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, AutodiffError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, AutodiffError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, AutodiffError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, AutodiffError> {
        require_2d("matmul", a)?;
        require_2d("matmul", b)?;
        if a.cols() != b.rows() {
            return Err(mismatch("matmul", a, b));
        }
        let ia = self.track(a)?;
        let ib = self.track(b)?;
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let data = gemm(Operand::plain(a.data(), m, k), Operand::plain(b.data(), k, n));
        Ok(self.push(vec![m, n], data, Op::MatMul(ia, ib), &[ia, ib]))
    }

    pub fn transpose(&mut self, a: &Tensor) -> Result<Tensor, AutodiffError> {
        require_2d("transpose", a)?;
        let ia = self.track(a)?;
        let (r, c) = (a.rows(), a.cols());
        let data = transpose_data(a.data(), r, c);
        Ok(self.push(vec![c, r], data, Op::Transpose(ia), &[ia]))
    }

    pub fn concat_rows(&mut self, parts: &[Tensor]) -> Result<Tensor, AutodiffError> {
        let first = parts.first().ok_or(AutodiffError::EmptyInput("concat_rows"))?;
        let cols = first.last_dim();
        let mut ids = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            require_2d("concat_rows", p)?;
            if p.cols() != cols {
                return Err(mismatch("concat_rows", first, p));
            }
            ids.push(self.track(p)?);
            data.extend_from_slice(p.data());
            rows += p.rows();
        }
        Ok(self.push(vec![rows, cols], data, Op::ConcatRows(ids.clone()), &ids))
    }

    /// Rows `start..end` of a 2-D tensor.
    pub fn slice_rows(
        &mut self,
        a: &Tensor,
        start: usize,
        end: usize,
    ) -> Result<Tensor, AutodiffError> {
        require_2d("slice_rows", a)?;
        if start >= end || end > a.rows() {
            return Err(AutodiffError::OutOfRange {
                op: "slice_rows",
                start,
                end,
                shape: a.shape().to_vec(),
            });
        }
        let ia = self.track(a)?;
        let c = a.cols();
        let data = a.data()[start * c..end * c].to_vec();
        Ok(self.push(vec![end - start, c], data, Op::SliceRows(ia, start), &[ia]))
    }

    pub fn concat_cols(&mut self, parts: &[Tensor]) -> Result<Tensor, AutodiffError> {
        let first = parts.first().ok_or(AutodiffError::EmptyInput("concat_cols"))?;
        require_2d("concat_cols", first)?;
        let rows = first.rows();
        let mut ids = Vec::with_capacity(parts.len());
        let mut total = 0;
        for p in parts {
            require_2d("concat_cols", p)?;
            if p.rows() != rows {
                return Err(mismatch("concat_cols", first, p));
            }
            ids.push(self.track(p)?);
            total += p.cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                let c = p.cols();
                data.extend_from_slice(&p.data()[r * c..(r + 1) * c]);
            }
        }
        Ok(self.push(vec![rows, total], data, Op::ConcatCols(ids.clone()), &ids))
    }

    /// Columns `start..end` of a 2-D tensor.
    pub fn slice_cols(
        &mut self,
        a: &Tensor,
        start: usize,
        end: usize,
    ) -> Result<Tensor, AutodiffError> {
        require_2d("slice_cols", a)?;
        if start >= end || end > a.cols() {
            return Err(AutodiffError::OutOfRange {
                op: "slice_cols",
                start,
                end,
                shape: a.shape().to_vec(),
            });
        }
        let ia = self.track(a)?;
        let (r, c) = (a.rows(), a.cols());
        let w = end - start;
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&a.data()[i * c + start..i * c + end]);
        }
        Ok(self.push(vec![r, w], data, Op::SliceCols(ia, start), &[ia]))
    }

    pub fn sum(&mut self, a: &Tensor) -> Result<Tensor, AutodiffError> {
        let ia = self.track(a)?;
        let s: f64 = a.data().iter().sum();
        Ok(self.push(vec![1], vec![s], Op::Sum(ia), &[ia]))
    }

    pub fn mean(&mut self, a: &Tensor) -> Result<Tensor, AutodiffError> {
        let ia = self.track(a)?;
        let s: f64 = a.data().iter().sum::<f64>() / a.len() as f64;
        Ok(self.push(vec![1], vec![s], Op::Mean(ia), &[ia]))
    }

    pub fn scale(&mut self, a: &Tensor, factor: f64) -> Result<Tensor, AutodiffError> {
        let ia = self.track(a)?;
        let data = a.data().iter().map(|&v| v * factor).collect();
        Ok(self.push(a.shape().to_vec(), data, Op::Scale(ia, factor), &[ia]))
    }

    /// Tanh approximation of GELU.
    pub fn gelu_tanh(&mut self, a: &Tensor) -> Result<Tensor, AutodiffError> {
        let ia = self.track(a)?;
        let data = a.data().iter().map(|&v| gelu_tanh(v)).collect();
        Ok(self.push(a.shape().to_vec(), data, Op::Gelu(ia), &[ia]))
    }

    /// Normalizes each row over the last axis to zero mean, unit variance.
    pub fn layer_norm(&mut self, a: &Tensor) -> Result<Tensor, AutodiffError> {
        let ia = self.track(a)?;
        let w = a.last_dim();
        let mut data = Vec::with_capacity(a.len());
        let mut inv_std = Vec::with_capacity(a.outer_rows());
        for row in a.data().chunks(w) {
            let mu = row.iter().sum::<f64>() / w as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / w as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            data.extend(row.iter().map(|v| (v - mu) * is));
        }
        Ok(self.push(
            a.shape().to_vec(),
            data,
            Op::LayerNorm { input: ia, inv_std },
            &[ia],
        ))
    }

    pub fn softmax(&mut self, a: &Tensor) -> Result<Tensor, AutodiffError> {
        if !a.is_finite() {
            return Err(AutodiffError::NonFinite("softmax"));
        }
        let ia = self.track(a)?;
        let w = a.last_dim();
        let mut data = Vec::with_capacity(a.len());
        for row in a.data().chunks(w) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let start = data.len();
            let mut total = 0.0;
            for &v in row {
                let e = (v - max).exp();
                total += e;
                data.push(e);
            }
            for v in &mut data[start..] {
                *v /= total;
            }
        }
        Ok(self.push(a.shape().to_vec(), data, Op::Softmax(ia), &[ia]))
    }

    /// Natural log with inputs floored at [`LOG_EPS`].
    pub fn log(&mut self, a: &Tensor) -> Result<Tensor, AutodiffError> {
        if a.data().iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(AutodiffError::NonFinite("log"));
        }
        let ia = self.track(a)?;
        let data = a.data().iter().map(|&v| v.max(LOG_EPS).ln()).collect();
        Ok(self.push(a.shape().to_vec(), data, Op::Log(ia), &[ia]))
    }

    pub fn exp(&mut self, a: &Tensor) -> Result<Tensor, AutodiffError> {
        let ia = self.track(a)?;
        let data = a.data().iter().map(|&v| v.exp()).collect();
        Ok(self.push(a.shape().to_vec(), data, Op::Exp(ia), &[ia]))
    }

    /// Scales each row to unit L2 norm; rows with norm below [`NORM_EPS`]
    /// are divided by `NORM_EPS` instead.
    pub fn l2_normalize(&mut self, a: &Tensor) -> Result<Tensor, AutodiffError> {
        let ia = self.track(a)?;
        let w = a.last_dim();
        let mut data = Vec::with_capacity(a.len());
        let mut norms = Vec::with_capacity(a.outer_rows());
        for row in a.data().chunks(w) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
            norms.push(n);
            data.extend(row.iter().map(|v| v / n));
        }
        Ok(self.push(
            a.shape().to_vec(),
            data,
            Op::L2Normalize { input: ia, norms },
            &[ia],
        ))
    }

    /// Pairwise cosine similarity between the rows of `a` (`[n, d]`) and
    /// the rows of `b` (`[m, d]`), giving `[n, m]`. Zero rows score 0.
    pub fn cosine_similarity(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, AutodiffError> {
        require_2d("cosine_similarity", a)?;
        require_2d("cosine_similarity", b)?;
        if a.cols() != b.cols() {
            return Err(mismatch("cosine_similarity", a, b));
        }
        let an = self.l2_normalize(a)?;
        let bn = self.l2_normalize(b)?;
        let bt = self.transpose(&bn)?;
        self.matmul(&an, &bt)
    }

    /// Reverse sweep from a scalar sink. Every trainable leaf gets an entry;
    /// leaves the sink does not depend on get zeros.
    pub fn backward(&self, sink: &Tensor) -> Result<Gradients, AutodiffError> {
        let id = sink.node().ok_or(AutodiffError::UntrackedSink)?;
        if id.0 >= self.nodes.len() {
            return Err(AutodiffError::UnknownNode(id.0));
        }
        let sink_node = &self.nodes[id.0];
        if sink_node.value.len() != 1 {
            return Err(AutodiffError::NonScalarSink {
                shape: sink_node.value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; id.0 + 1];
        grads[id.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for idx in (0..=id.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if node.trainable {
                out.by_node.insert(
                    NodeId(idx),
                    Tensor::from_parts(node.value.shape().to_vec(), g),
                );
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            if node.trainable && !out.by_node.contains_key(&NodeId(idx)) {
                out.by_node
                    .insert(NodeId(idx), Tensor::zeros(node.value.shape()));
            }
        }
        Ok(out)
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b, kind) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if self.wants(*b) {
                    let gb = reduce_broadcast(g, *kind, self.value(*b).len());
                    accumulate(grads, *b, gb);
                }
            }
            Op::Sub(a, b, kind) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if self.wants(*b) {
                    let mut gb = reduce_broadcast(g, *kind, self.value(*b).len());
                    gb.iter_mut().for_each(|v| *v = -*v);
                    accumulate(grads, *b, gb);
                }
            }
            Op::Mul(a, b, kind) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let w = out.last_dim();
                let b_at = |i: usize| match kind {
                    Broadcast::Same => bv[i],
                    Broadcast::Scalar => bv[0],
                    Broadcast::Row => bv[i % w],
                };
                if self.wants(*a) {
                    let ga = g.iter().enumerate().map(|(i, &gi)| gi * b_at(i)).collect();
                    accumulate(grads, *a, ga);
                }
                if self.wants(*b) {
                    let prod: Vec<f64> = g.iter().zip(av).map(|(gi, ai)| gi * ai).collect();
                    accumulate(grads, *b, reduce_broadcast(&prod, *kind, bv.len()));
                }
            }
            Op::MatMul(a, b) => {
                let at = self.value(*a);
                let bt = self.value(*b);
                let (m, k, n) = (at.rows(), at.cols(), bt.cols());
                if self.wants(*a) {
                    // dA = dC · Bᵀ
                    let ga = gemm(Operand::plain(g, m, n), Operand::t(bt.data(), k, n));
                    accumulate(grads, *a, ga);
                }
                if self.wants(*b) {
                    // dB = Aᵀ · dC
                    let gb = gemm(Operand::t(at.data(), m, k), Operand::plain(g, m, n));
                    accumulate(grads, *b, gb);
                }
            }
            Op::Transpose(a) => {
                // out is [c, r]; gradient goes back to [r, c]
                let (oc, or) = (out.rows(), out.cols());
                accumulate(grads, *a, transpose_data(g, oc, or));
            }
            Op::ConcatRows(ids) => {
                let mut offset = 0;
                for id in ids {
                    let len = self.value(*id).len();
                    if self.wants(*id) {
                        accumulate(grads, *id, g[offset..offset + len].to_vec());
                    }
                    offset += len;
                }
            }
            Op::SliceRows(a, start) => {
                let src = self.value(*a);
                let c = src.cols();
                let mut ga = vec![0.0; src.len()];
                ga[start * c..start * c + g.len()].copy_from_slice(g);
                accumulate(grads, *a, ga);
            }
            Op::ConcatCols(ids) => {
                let rows = out.rows();
                let total = out.cols();
                let mut offset = 0;
                for id in ids {
                    let c = self.value(*id).cols();
                    if self.wants(*id) {
                        let mut part = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            part.extend_from_slice(&g[r * total + offset..r * total + offset + c]);
                        }
                        accumulate(grads, *id, part);
                    }
                    offset += c;
                }
            }
            Op::SliceCols(a, start) => {
                let src = self.value(*a);
                let (r, c) = (src.rows(), src.cols());
                let w = out.cols();
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    ga[i * c + start..i * c + start + w].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                accumulate(grads, *a, ga);
            }
            Op::Sum(a) => {
                let len = self.value(*a).len();
                accumulate(grads, *a, vec![g[0]; len]);
            }
            Op::Mean(a) => {
                let len = self.value(*a).len();
                accumulate(grads, *a, vec![g[0] / len as f64; len]);
            }
            Op::Scale(a, factor) => {
                accumulate(grads, *a, g.iter().map(|v| v * factor).collect());
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                let ga = g
                    .iter()
                    .zip(x)
                    .map(|(gi, &xi)| gi * gelu_tanh_grad(xi))
                    .collect();
                accumulate(grads, *a, ga);
            }
            Op::LayerNorm { input, inv_std } => {
                let w = out.last_dim();
                let y = out.data();
                let mut ga = Vec::with_capacity(g.len());
                for (r, is) in inv_std.iter().enumerate() {
                    let gr = &g[r * w..(r + 1) * w];
                    let yr = &y[r * w..(r + 1) * w];
                    let mean_g = gr.iter().sum::<f64>() / w as f64;
                    let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / w as f64;
                    ga.extend(
                        gr.iter()
                            .zip(yr)
                            .map(|(gi, yi)| is * (gi - mean_g - yi * mean_gy)),
                    );
                }
                accumulate(grads, *input, ga);
            }
            Op::Softmax(a) => {
                let w = out.last_dim();
                let y = out.data();
                let mut ga = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(w).zip(y.chunks(w)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    ga.extend(gr.iter().zip(yr).map(|(gi, yi)| yi * (gi - dot)));
                }
                accumulate(grads, *a, ga);
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                let ga = g
                    .iter()
                    .zip(x)
                    .map(|(gi, &xi)| if xi > LOG_EPS { gi / xi } else { 0.0 })
                    .collect();
                accumulate(grads, *a, ga);
            }
            Op::Exp(a) => {
                let ga = g.iter().zip(out.data()).map(|(gi, yi)| gi * yi).collect();
                accumulate(grads, *a, ga);
            }
            Op::L2Normalize { input, norms } => {
                let w = out.last_dim();
                let y = out.data();
                let mut ga = Vec::with_capacity(g.len());
                for (r, &n) in norms.iter().enumerate() {
                    let gr = &g[r * w..(r + 1) * w];
                    let yr = &y[r * w..(r + 1) * w];
                    if n > NORM_EPS {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        ga.extend(gr.iter().zip(yr).map(|(gi, yi)| (gi - yi * dot) / n));
                    } else {
                        ga.extend(gr.iter().map(|gi| gi / n));
                    }
                }
                accumulate(grads, *input, ga);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: NodeId, g: Vec<f64>) {
    match &mut grads[id.0] {
        Some(existing) => existing.iter_mut().zip(g).for_each(|(e, v)| *e += v),
        slot @ None => *slot = Some(g),
    }
}

fn reduce_broadcast(g: &[f64], kind: Broadcast, len: usize) -> Vec<f64> {
    match kind {
        Broadcast::Same => g.to_vec(),
        Broadcast::Scalar => vec![g.iter().sum()],
        Broadcast::Row => {
            let mut out = vec![0.0; len];
            for row in g.chunks(len) {
                out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
            }
            out
        }
    }
}

fn transpose_data(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = data[i * cols + j];
        }
    }
    out
}
