//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in creation order. Parents always have
//! smaller ids than their children, so the tape is acyclic by construction and
//! a reverse sweep over it is a valid topological order for backprop.
//!
//! Nodes can be *tapped*: their gradient is kept after [`Graph::backward`] so
//! callers can read attention-map gradients (Grad-CAM) or the gradient flowing
//! into an externally supplied input. A tap can also carry a one-element
//! perturbation, which is how finite-difference oracles probe a map that is
//! otherwise an internal intermediate.

use crate::error::{Error, Result};
use crate::tensor::{
    log_sum_exp, matmul_acc, matmul_tn_acc, softmax_in_place, transpose_buf, Tensor,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named learnable tensors, in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn zeros_like(&self) -> Vec<Tensor> {
        self.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect()
    }
}

#[derive(Debug)]
enum Value {
    Owned(Tensor),
    Param(ParamId),
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    /// `alpha * a * b^T`
    MatMulT { a: NodeId, b: NodeId, alpha: f64 },
    Add(NodeId, NodeId),
    /// Adds a `[1, m]` row to every row of `a`.
    AddBias(NodeId, NodeId),
    Scale(NodeId, f64),
    Mul(NodeId, NodeId),
    Gelu(NodeId),
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Vec<f64>, rstd: Vec<f64> },
    Softmax { a: NodeId },
    Embedding { table: NodeId, ids: Vec<usize> },
    SliceCols { a: NodeId, start: usize },
    SliceRows { a: NodeId, start: usize },
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    MeanRows(NodeId),
    Sum(NodeId),
    Pick { a: NodeId, index: usize },
    SoftmaxCrossEntropy { logits: NodeId, targets: Vec<Option<usize>>, eps: f64, probs: Vec<f64>, count: usize },
}

#[derive(Debug)]
struct Node {
    value: Value,
    op: Op,
    requires_grad: bool,
    keep_grad: bool,
}

/// A one-element additive perturbation applied to the `tap`-th tapped node at
/// creation time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TapPerturbation {
    pub tap: usize,
    pub element: usize,
    pub delta: f64,
}

pub struct Graph<'p> {
    params: Option<&'p ParamStore>,
    param_grads: bool,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<NodeId>>,
    grads: Vec<Option<Tensor>>,
    taps: Vec<NodeId>,
    perturbation: Option<TapPerturbation>,
    non_finite: Option<String>,
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<'p> Graph<'p> {
    /// A graph without parameters; leaves are plain inputs.
    pub fn new() -> Self {
        Self::build(None, false)
    }

    /// A graph whose parameter leaves take gradients.
    pub fn with_params(params: &'p ParamStore) -> Self {
        Self::build(Some(params), true)
    }

    /// A graph over fixed parameters: no parameter gradients, but tapped nodes
    /// and inputs created with [`Graph::input_with_grad`] still get them.
    pub fn frozen(params: &'p ParamStore) -> Self {
        Self::build(Some(params), false)
    }

    fn build(params: Option<&'p ParamStore>, param_grads: bool) -> Self {
        Self {
            params,
            param_grads,
            nodes: Vec::new(),
            param_nodes: vec![None; params.map_or(0, ParamStore::len)],
            grads: Vec::new(),
            taps: Vec::new(),
            perturbation: None,
            non_finite: None,
        }
    }

    pub fn set_perturbation(&mut self, perturbation: Option<TapPerturbation>) {
        self.perturbation = perturbation;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        match &self.nodes[id.0].value {
            Value::Owned(t) => t,
            Value::Param(p) => self.params.expect("param node without store").get(*p),
        }
    }

    /// First non-finite intermediate recorded, if any.
    pub fn check_finite(&self) -> Result<()> {
        match &self.non_finite {
            Some(what) => Err(Error::NonFinite(what.clone())),
            None => Ok(()),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        if self.non_finite.is_none() && !value.is_finite() {
            self.non_finite = Some(format!("node {} ({})", self.nodes.len(), op_name(&op)));
        }
        self.nodes.push(Node { value: Value::Owned(value), op, requires_grad, keep_grad: false });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// An input whose gradient is retained after backward.
    pub fn input_with_grad(&mut self, value: Tensor) -> NodeId {
        let id = self.push(value, Op::Leaf, true);
        self.nodes[id.0].keep_grad = true;
        id
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(node) = self.param_nodes[id.0] {
            return node;
        }
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Leaf,
            requires_grad: self.param_grads,
            keep_grad: self.param_grads,
        });
        let node = NodeId(self.nodes.len() - 1);
        self.param_nodes[id.0] = Some(node);
        node
    }

    /// Marks `id` as tapped: it (and everything downstream created afterwards)
    /// takes part in backprop and its gradient is kept. Returns the tap ordinal.
    pub fn tap(&mut self, id: NodeId) -> usize {
        let ordinal = self.taps.len();
        if let Some(p) = self.perturbation {
            if p.tap == ordinal {
                if let Value::Owned(t) = &mut self.nodes[id.0].value {
                    t.data_mut()[p.element] += p.delta;
                }
            }
        }
        let node = &mut self.nodes[id.0];
        node.requires_grad = true;
        node.keep_grad = true;
        self.taps.push(id);
        ordinal
    }

    pub fn taps(&self) -> &[NodeId] {
        &self.taps
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        let (n, k, m) = (av.rows(), av.cols(), bv.cols());
        assert_eq!(k, bv.rows(), "matmul inner dimensions {:?} x {:?}", av.shape(), bv.shape());
        let mut out = vec![0.0; n * m];
        matmul_acc(av.data(), bv.data(), &mut out, n, k, m);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::matrix(n, m, out), Op::MatMul(a, b), rg)
    }

    /// `alpha * a * b^T` for `a: [n, k]`, `b: [m, k]`.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId, alpha: f64) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        let (n, k, m) = (av.rows(), av.cols(), bv.rows());
        assert_eq!(k, bv.cols(), "matmul_t inner dimensions {:?} x {:?}^T", av.shape(), bv.shape());
        let bt = transpose_buf(bv.data(), m, k);
        let mut out = vec![0.0; n * m];
        matmul_acc(av.data(), &bt, &mut out, n, k, m);
        if alpha != 1.0 {
            out.iter_mut().for_each(|v| *v *= alpha);
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::matrix(n, m, out), Op::MatMulT { a, b, alpha }, rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "add shapes");
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let shape = av.shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(shape, data).expect("same shape"), Op::Add(a, b), rg)
    }

    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(bias));
        let m = av.cols();
        assert_eq!(bv.numel(), m, "bias length");
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(m) {
            for (x, b) in row.iter_mut().zip(bv.data()) {
                *x += b;
            }
        }
        let rows = av.rows();
        let rg = self.rg(a) || self.rg(bias);
        self.push(Tensor::matrix(rows, m, data), Op::AddBias(a, bias), rg)
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let av = self.value(a);
        let data = av.data().iter().map(|x| x * factor).collect();
        let shape = av.shape().to_vec();
        let rg = self.rg(a);
        self.push(Tensor::new(shape, data).expect("same shape"), Op::Scale(a, factor), rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "mul shapes");
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let shape = av.shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(shape, data).expect("same shape"), Op::Mul(a, b), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()))
            .collect();
        let shape = av.shape().to_vec();
        let rg = self.rg(a);
        self.push(Tensor::new(shape, data).expect("same shape"), Op::Gelu(a), rg)
    }

    /// Row-wise layer normalisation with learned gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let xv = self.value(x);
        let (rows, m) = (xv.rows(), xv.cols());
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; rows * m];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * m];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..m {
                let h = (row[j] - mean) * rs;
                xhat[r * m + j] = h;
                out[r * m + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(Tensor::matrix(rows, m, out), Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg)
    }

    /// Row-wise softmax. With `causal`, entry `(i, j)` for `j > i` is exactly 0.
    pub fn softmax_rows(&mut self, a: NodeId, causal: bool) -> NodeId {
        let av = self.value(a);
        let (rows, m) = (av.rows(), av.cols());
        let mut out = av.data().to_vec();
        for (r, row) in out.chunks_mut(m).enumerate() {
            if causal && r + 1 < m {
                softmax_in_place(&mut row[..=r]);
                row[r + 1..].iter_mut().for_each(|v| *v = 0.0);
            } else {
                softmax_in_place(row);
            }
        }
        let rg = self.rg(a);
        self.push(Tensor::matrix(rows, m, out), Op::Softmax { a }, rg)
    }

    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let tv = self.value(table);
        let (vocab, m) = (tv.rows(), tv.cols());
        let mut out = Vec::with_capacity(ids.len() * m);
        for &id in ids {
            assert!(id < vocab, "token id {id} outside vocabulary of {vocab}");
            out.extend_from_slice(tv.row(id));
        }
        let rg = self.rg(table);
        self.push(Tensor::matrix(ids.len(), m, out), Op::Embedding { table, ids: ids.to_vec() }, rg)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let av = self.value(a);
        let (rows, m) = (av.rows(), av.cols());
        assert!(start + len <= m, "slice_cols out of range");
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&av.row(r)[start..start + len]);
        }
        let rg = self.rg(a);
        self.push(Tensor::matrix(rows, len, out), Op::SliceCols { a, start }, rg)
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let av = self.value(a);
        let m = av.cols();
        assert!(start + len <= av.rows(), "slice_rows out of range");
        let out = av.data()[start * m..(start + len) * m].to_vec();
        let rg = self.rg(a);
        self.push(Tensor::matrix(len, m, out), Op::SliceRows { a, start }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let pv = self.value(p);
                assert_eq!(pv.rows(), rows, "concat_cols row mismatch");
                out.extend_from_slice(pv.row(r));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::matrix(rows, total, out), Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let m = self.value(parts[0]).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), m, "concat_rows column mismatch");
            out.extend_from_slice(pv.data());
            rows += pv.rows();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::matrix(rows, m, out), Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let (rows, m) = (av.rows(), av.cols());
        let mut out = vec![0.0; m];
        for r in 0..rows {
            for (o, v) in out.iter_mut().zip(av.row(r)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= rows as f64);
        let rg = self.rg(a);
        self.push(Tensor::matrix(1, m, out), Op::MeanRows(a), rg)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// A single element (flat row-major index) as a scalar node.
    pub fn pick(&mut self, a: NodeId, index: usize) -> NodeId {
        let v = self.value(a).data()[index];
        let rg = self.rg(a);
        self.push(Tensor::scalar(v), Op::Pick { a, index }, rg)
    }

    /// Mean over rows with a target of
    /// `(1 - eps) * (-log p[target]) + eps * mean_v(-log p[v])`.
    /// Rows whose target is `None` are excluded from the mean.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: &[Option<usize>], eps: f64) -> NodeId {
        let lv = self.value(logits);
        let (rows, vocab) = (lv.rows(), lv.cols());
        assert_eq!(rows, targets.len(), "one target per logit row");
        let mut probs = lv.data().to_vec();
        let mut total = 0.0;
        let mut count = 0;
        for (r, target) in targets.iter().enumerate() {
            let row = lv.row(r);
            let lse = log_sum_exp(row);
            let p = &mut probs[r * vocab..(r + 1) * vocab];
            p.iter_mut().zip(row).for_each(|(pv, &z)| *pv = (z - lse).exp());
            if let Some(t) = *target {
                assert!(t < vocab, "target {t} outside {vocab} classes");
                let mean_z = row.iter().sum::<f64>() / vocab as f64;
                total += (1.0 - eps) * (lse - row[t]) + eps * (lse - mean_z);
                count += 1;
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy { logits, targets: targets.to_vec(), eps, probs, count },
            rg,
        )
    }

    /// Backpropagates from a scalar node. Previous gradients are discarded, so
    /// calling this twice on the same graph yields the same result.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let shape = self.value(loss).shape().to_vec();
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        self.backward_from(&[(loss, Tensor::filled(&shape, 1.0))])
    }

    /// Backpropagates from arbitrary nodes with explicit upstream gradients.
    pub fn backward_from(&mut self, seeds: &[(NodeId, Tensor)]) -> Result<()> {
        self.check_finite()?;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        let mut start = 0;
        for (id, seed) in seeds {
            if seed.numel() != self.value(*id).numel() {
                return Err(Error::Shape(format!(
                    "seed shape {:?} for node of shape {:?}",
                    seed.shape(),
                    self.value(*id).shape()
                )));
            }
            accumulate(&mut self.grads[id.0], seed.clone());
            start = start.max(id.0);
        }
        for i in (0..=start).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(grad) = self.grads[i].take() else { continue };
            self.backprop_node(i, &grad);
            if self.nodes[i].keep_grad {
                self.grads[i] = Some(grad);
            }
        }
        Ok(())
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn param_grad(&self, id: ParamId) -> Option<&Tensor> {
        self.param_nodes.get(id.0).copied().flatten().and_then(|n| self.grad(n))
    }

    /// Adds every parameter gradient into `acc` (indexed by [`ParamId`]).
    pub fn accumulate_param_grads(&self, acc: &mut [Tensor]) {
        for (pid, node) in self.param_nodes.iter().enumerate() {
            if let Some(g) = node.and_then(|n| self.grad(n)) {
                acc[pid].add_assign(g);
            }
        }
    }

    fn send(&mut self, to: NodeId, grad: Tensor) {
        if self.nodes[to.0].requires_grad {
            accumulate(&mut self.grads[to.0], grad);
        }
    }

    fn backprop_node(&mut self, i: usize, dy: &Tensor) {
        // The op is moved out temporarily so parents can be borrowed freely.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, k, m) = (av.rows(), av.cols(), bv.cols());
                let da = self.rg(*a).then(|| {
                    let bt = transpose_buf(bv.data(), k, m);
                    let mut da = vec![0.0; n * k];
                    matmul_acc(dy.data(), &bt, &mut da, n, m, k);
                    Tensor::matrix(n, k, da)
                });
                let db = self.rg(*b).then(|| {
                    let mut db = vec![0.0; k * m];
                    matmul_tn_acc(av.data(), dy.data(), &mut db, n, k, m);
                    Tensor::matrix(k, m, db)
                });
                if let Some(g) = da {
                    self.send(*a, g);
                }
                if let Some(g) = db {
                    self.send(*b, g);
                }
            }
            Op::MatMulT { a, b, alpha } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, k, m) = (av.rows(), av.cols(), bv.rows());
                let scaled: Vec<f64>;
                let d = if *alpha == 1.0 {
                    dy.data()
                } else {
                    scaled = dy.data().iter().map(|v| v * alpha).collect();
                    &scaled
                };
                let da = self.rg(*a).then(|| {
                    let mut da = vec![0.0; n * k];
                    matmul_acc(d, bv.data(), &mut da, n, m, k);
                    Tensor::matrix(n, k, da)
                });
                let db = self.rg(*b).then(|| {
                    let mut db = vec![0.0; m * k];
                    matmul_tn_acc(d, av.data(), &mut db, n, m, k);
                    Tensor::matrix(m, k, db)
                });
                if let Some(g) = da {
                    self.send(*a, g);
                }
                if let Some(g) = db {
                    self.send(*b, g);
                }
            }
            Op::Add(a, b) => {
                self.send(*a, dy.clone());
                self.send(*b, dy.clone());
            }
            Op::AddBias(a, bias) => {
                if self.rg(*bias) {
                    let m = dy.cols();
                    let mut db = vec![0.0; m];
                    for row in dy.data().chunks(m) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    let shape = self.value(*bias).shape().to_vec();
                    self.send(*bias, Tensor::new(shape, db).expect("bias shape"));
                }
                self.send(*a, dy.clone());
            }
            Op::Scale(a, factor) => {
                let mut g = dy.clone();
                g.data_mut().iter_mut().for_each(|v| *v *= factor);
                self.send(*a, g);
            }
            Op::Mul(a, b) => {
                let ga = self.rg(*a).then(|| elementwise(dy, self.value(*b), |d, y| d * y));
                let gb = self.rg(*b).then(|| elementwise(dy, self.value(*a), |d, x| d * x));
                if let Some(g) = ga {
                    self.send(*a, g);
                }
                if let Some(g) = gb {
                    self.send(*b, g);
                }
            }
            Op::Gelu(a) => {
                let g = elementwise(dy, self.value(*a), |d, x| {
                    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                    let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                    d * (0.5 * (1.0 + t) + 0.5 * x * dt)
                });
                self.send(*a, g);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let m = dy.cols();
                let rows = dy.rows();
                let gv = self.value(*gamma).data().to_vec();
                if self.rg(*gamma) || self.rg(*beta) {
                    let mut dg = vec![0.0; m];
                    let mut db = vec![0.0; m];
                    for r in 0..rows {
                        for j in 0..m {
                            let d = dy.data()[r * m + j];
                            dg[j] += d * xhat[r * m + j];
                            db[j] += d;
                        }
                    }
                    let gshape = self.value(*gamma).shape().to_vec();
                    let bshape = self.value(*beta).shape().to_vec();
                    self.send(*gamma, Tensor::new(gshape, dg).expect("gamma shape"));
                    self.send(*beta, Tensor::new(bshape, db).expect("beta shape"));
                }
                if self.rg(*x) {
                    let mut dx = vec![0.0; rows * m];
                    for r in 0..rows {
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for j in 0..m {
                            let d = dy.data()[r * m + j] * gv[j];
                            mean_d += d;
                            mean_dh += d * xhat[r * m + j];
                        }
                        mean_d /= m as f64;
                        mean_dh /= m as f64;
                        for j in 0..m {
                            let d = dy.data()[r * m + j] * gv[j];
                            dx[r * m + j] = rstd[r] * (d - mean_d - xhat[r * m + j] * mean_dh);
                        }
                    }
                    self.send(*x, Tensor::matrix(rows, m, dx));
                }
            }
            Op::Softmax { a } => {
                let y = match &self.nodes[i].value {
                    Value::Owned(t) => t,
                    Value::Param(_) => unreachable!("softmax output is owned"),
                };
                let m = y.cols();
                let mut dx = vec![0.0; y.numel()];
                for (r, (yr, dr)) in y.data().chunks(m).zip(dy.data().chunks(m)).enumerate() {
                    let dot: f64 = yr.iter().zip(dr).map(|(p, d)| p * d).sum();
                    for j in 0..m {
                        dx[r * m + j] = yr[j] * (dr[j] - dot);
                    }
                }
                let rows = y.rows();
                self.send(*a, Tensor::matrix(rows, m, dx));
            }
            Op::Embedding { table, ids } => {
                let tv = self.value(*table);
                let (vocab, m) = (tv.rows(), tv.cols());
                let mut dt = vec![0.0; vocab * m];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..m {
                        dt[id * m + j] += dy.data()[r * m + j];
                    }
                }
                let shape = tv.shape().to_vec();
                self.send(*table, Tensor::new(shape, dt).expect("table shape"));
            }
            Op::SliceCols { a, start } => {
                let av = self.value(*a);
                let (rows, m) = (av.rows(), av.cols());
                let len = dy.cols();
                let mut da = vec![0.0; rows * m];
                for r in 0..rows {
                    da[r * m + start..r * m + start + len].copy_from_slice(dy.row(r));
                }
                self.send(*a, Tensor::matrix(rows, m, da));
            }
            Op::SliceRows { a, start } => {
                let av = self.value(*a);
                let (rows, m) = (av.rows(), av.cols());
                let mut da = vec![0.0; rows * m];
                da[start * m..start * m + dy.numel()].copy_from_slice(dy.data());
                self.send(*a, Tensor::matrix(rows, m, da));
            }
            Op::ConcatCols(parts) => {
                let rows = dy.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.rg(p) {
                        let mut g = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            g.extend_from_slice(&dy.row(r)[offset..offset + w]);
                        }
                        self.send(p, Tensor::matrix(rows, w, g));
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let m = dy.cols();
                let mut offset = 0;
                for &p in parts {
                    let r = self.value(p).rows();
                    if self.rg(p) {
                        let g = dy.data()[offset * m..(offset + r) * m].to_vec();
                        self.send(p, Tensor::matrix(r, m, g));
                    }
                    offset += r;
                }
            }
            Op::MeanRows(a) => {
                let av = self.value(*a);
                let (rows, m) = (av.rows(), av.cols());
                let scale = 1.0 / rows as f64;
                let mut da = Vec::with_capacity(rows * m);
                for _ in 0..rows {
                    da.extend(dy.data().iter().map(|v| v * scale));
                }
                self.send(*a, Tensor::matrix(rows, m, da));
            }
            Op::Sum(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.send(*a, Tensor::filled(&shape, dy.data()[0]));
            }
            Op::Pick { a, index } => {
                let shape = self.value(*a).shape().to_vec();
                let mut g = Tensor::zeros(&shape);
                g.data_mut()[*index] = dy.data()[0];
                self.send(*a, g);
            }
            Op::SoftmaxCrossEntropy { logits, targets, eps, probs, count } => {
                let vocab = self.value(*logits).cols();
                let rows = targets.len();
                let mut dl = vec![0.0; rows * vocab];
                if *count > 0 {
                    let scale = dy.data()[0] / *count as f64;
                    let uniform = eps / vocab as f64;
                    for (r, target) in targets.iter().enumerate() {
                        let Some(t) = *target else { continue };
                        for j in 0..vocab {
                            let mut g = probs[r * vocab + j] - uniform;
                            if j == t {
                                g -= 1.0 - eps;
                            }
                            dl[r * vocab + j] = g * scale;
                        }
                    }
                }
                self.send(*logits, Tensor::matrix(rows, vocab, dl));
            }
        }
        self.nodes[i].op = op;
    }
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn accumulate(slot: &mut Option<Tensor>, grad: Tensor) {
    match slot {
        Some(existing) => existing.add_assign(&grad),
        None => *slot = Some(grad),
    }
}

fn elementwise(dy: &Tensor, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = dy.data().iter().zip(other.data()).map(|(&d, &o)| f(d, o)).collect();
    Tensor::new(dy.shape().to_vec(), data).expect("same shape")
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::MatMulT { .. } => "matmul_t",
        Op::Add(..) => "add",
        Op::AddBias(..) => "add_bias",
        Op::Scale(..) => "scale",
        Op::Mul(..) => "mul",
        Op::Gelu(..) => "gelu",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Softmax { .. } => "softmax",
        Op::Embedding { .. } => "embedding",
        Op::SliceCols { .. } => "slice_cols",
        Op::SliceRows { .. } => "slice_rows",
        Op::ConcatCols(..) => "concat_cols",
        Op::ConcatRows(..) => "concat_rows",
        Op::MeanRows(..) => "mean_rows",
        Op::Sum(..) => "sum",
        Op::Pick { .. } => "pick",
        Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
    }
}

/// Central finite differences of a scalar function, one coordinate at a time:
/// `(f(p + h e_i) - f(p - h e_i)) / 2h`.
pub fn fd_gradient<F>(mut f: F, params: &Tensor, step: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidInput(format!("finite-difference step must be positive, got {step}")));
    }
    let mut probe = params.clone();
    let mut grad = Tensor::zeros(params.shape());
    for i in 0..params.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("finite-difference evaluation at coordinate {i}")));
        }
        grad.data_mut()[i] = (plus - minus) / (2.0 * step);
    }
    Ok(grad)
}
