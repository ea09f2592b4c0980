//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is an append-only arena of nodes. Every node records the
//! op that produced it and the ids of its parents; since parents always
//! precede children, reverse insertion order is a valid reverse
//! topological order and no explicit sort is needed.
//!
//! Gradients accumulate: [`Graph::backward`] adds `d loss / d node` into
//! the gradient slot of every node that requires grad, and repeated calls
//! keep adding until [`Graph::zero_grads`] is called.

use crate::error::{DalError, Result};
use crate::tensor::Tensor;

/// Lower clamp applied to probabilities before taking a log.
pub const PROB_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Linear { x: NodeId, w: NodeId, b: NodeId },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Gather(NodeId, Vec<usize>),
    MeanRows(NodeId),
    Softmax(NodeId),
    SoftmaxRows(NodeId),
    Concat(Vec<NodeId>),
    Reshape(NodeId),
    Sum(NodeId),
    CrossEntropy { probs: NodeId, label: usize },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    // Allocated the first time backward reaches the node.
    grad: Option<Vec<f64>>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn mismatch(op: &str, a: &[usize], b: &[usize]) -> DalError {
    DalError::ShapeMismatch(format!("{op}: {a:?} vs {b:?}"))
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

    /// Drops every node created after the first `len`; ids below `len`
    /// stay valid. Used to reuse bound parameters across instances.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor, op: Op, parents: &[NodeId]) -> NodeId {
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(value, op, rg)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Accumulated gradient; zeros for nodes backward never reached.
    pub fn grad(&self, id: NodeId) -> Tensor {
        let n = &self.nodes[id.0];
        let data = n.grad.clone().unwrap_or_else(|| vec![0.0; n.value.len()]);
        Tensor::from_parts(n.value.shape().to_vec(), data)
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k, n) = match (sa, sb) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => return Err(mismatch("matmul", sa, sb)),
        };
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                for (o, &y) in row.iter_mut().zip(brow) {
                    *o += x * y;
                }
            }
        }
        let v = Tensor::from_parts(vec![m, n], out);
        Ok(self.derived(v, Op::MatMul(a, b), &[a, b]))
    }

    /// `x · w + b` for a vector `x` of shape `[k]`, `w` `[k, n]`, `b` `[n]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        let (k, n) = match (sx, sw, sb) {
            ([k], [k2, n], [n2]) if k == k2 && n == n2 => (*k, *n),
            _ => return Err(mismatch("linear", sx, sw)),
        };
        let (xv, wv) = (self.value(x).data(), self.value(w).data());
        let mut out = self.value(b).data().to_vec();
        for p in 0..k {
            let xp = xv[p];
            for (o, &y) in out.iter_mut().zip(&wv[p * n..(p + 1) * n]) {
                *o += xp * y;
            }
        }
        let v = Tensor::from_parts(vec![n], out);
        Ok(self.derived(v, Op::Linear { x, w, b }, &[x, w, b]))
    }

    fn binary(&mut self, a: NodeId, b: NodeId, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Vec<f64>> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(mismatch(name, va.shape(), vb.shape()));
        }
        Ok(va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        let v = Tensor::from_parts(self.shape(a).to_vec(), out);
        Ok(self.derived(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        let v = Tensor::from_parts(self.shape(a).to_vec(), out);
        Ok(self.derived(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        let v = Tensor::from_parts(self.shape(a).to_vec(), out);
        Ok(self.derived(v, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a `[n]` row to every row of an `[m, n]` matrix. This is the
    /// only broadcasting op, and it is explicit.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        let n = match (sa, sr) {
            ([_, n], [n2]) if n == n2 => *n,
            _ => return Err(mismatch("add_row", sa, sr)),
        };
        let rv = self.value(row).data();
        let out = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + rv[i % n])
            .collect();
        let v = Tensor::from_parts(sa.to_vec(), out);
        Ok(self.derived(v, Op::AddRow(a, row), &[a, row]))
    }

    fn unary(&mut self, a: NodeId, op: Op, f: impl Fn(f64) -> f64) -> NodeId {
        let va = self.value(a);
        let out = va.data().iter().map(|&x| f(x)).collect();
        let v = Tensor::from_parts(va.shape().to_vec(), out);
        self.derived(v, op, &[a])
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Neg(a), |x| -x)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(a, Op::Scale(a, c), |x| c * x)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Sigmoid(a), |x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        })
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        if let Some(x) = self.value(a).data().iter().find(|&&x| !(x > 0.0)) {
            return Err(DalError::Domain(format!("log of non-positive value {x}")));
        }
        Ok(self.unary(a, Op::Log(a), f64::ln))
    }

    /// Row lookup: `out[r] = table[ids[r]]`.
    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let t = self.value(table);
        let (rows, cols) = match t.shape() {
            [r, c] => (*r, *c),
            s => return Err(DalError::InvalidShape(format!("gather_rows needs a matrix, got {s:?}"))),
        };
        if ids.is_empty() {
            return Err(DalError::InvalidShape("gather_rows with no ids".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(DalError::Validation(format!("row id {bad} out of range for {rows} rows")));
        }
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            out.extend_from_slice(t.row(i));
        }
        let v = Tensor::from_parts(vec![ids.len(), cols], out);
        Ok(self.derived(v, Op::Gather(table, ids.to_vec()), &[table]))
    }

    /// Column means of an `[m, d]` matrix.
    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let (m, d) = match va.shape() {
            [m, d] if *m >= 1 => (*m, *d),
            s => return Err(DalError::InvalidShape(format!("mean_rows needs [m>=1, d], got {s:?}"))),
        };
        let mut out = vec![0.0; d];
        for i in 0..m {
            for (o, &x) in out.iter_mut().zip(va.row(i)) {
                *o += x;
            }
        }
        let inv = 1.0 / m as f64;
        out.iter_mut().for_each(|x| *x *= inv);
        let v = Tensor::from_parts(vec![d], out);
        Ok(self.derived(v, Op::MeanRows(a), &[a]))
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        if va.rank() != 1 {
            return Err(DalError::InvalidShape(format!("softmax needs a vector, got {:?}", va.shape())));
        }
        let max = va.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut out: Vec<f64> = va.data().iter().map(|&x| (x - max).exp()).collect();
        let z: f64 = out.iter().sum();
        out.iter_mut().for_each(|x| *x /= z);
        let v = Tensor::from_parts(va.shape().to_vec(), out);
        Ok(self.derived(v, Op::Softmax(a), &[a]))
    }

    /// Softmax of every row of an `[m, n]` matrix.
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let n = match va.shape() {
            [_, n] if *n >= 1 => *n,
            s => return Err(DalError::InvalidShape(format!("softmax_rows needs [m, n>=1], got {s:?}"))),
        };
        let mut out = va.data().to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.iter_mut().for_each(|x| *x = (*x - max).exp());
            let z: f64 = row.iter().sum();
            row.iter_mut().for_each(|x| *x /= z);
        }
        let v = Tensor::from_parts(va.shape().to_vec(), out);
        Ok(self.derived(v, Op::SoftmaxRows(a), &[a]))
    }

    /// Flattens and concatenates `parts` in order.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(DalError::InvalidArgument("concat of zero parts".into()));
        }
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let v = Tensor::from_parts(vec![out.len()], out);
        Ok(self.derived(v, Op::Concat(parts.to_vec()), parts))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let va = self.value(a);
        let v = Tensor::new(shape.to_vec(), va.data().to_vec())?;
        Ok(self.derived(v, Op::Reshape(a), &[a]))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().sum();
        self.derived(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// `-ln(clamp(probs[label], eps, 1 - eps))` for a two-class distribution.
    pub fn cross_entropy(&mut self, probs: NodeId, label: usize) -> Result<NodeId> {
        let vp = self.value(probs);
        if vp.shape() != [2] {
            return Err(DalError::InvalidShape(format!("cross_entropy needs [2], got {:?}", vp.shape())));
        }
        if label > 1 {
            return Err(DalError::InvalidLabel(label));
        }
        let p = vp.data()[label].clamp(PROB_EPS, 1.0 - PROB_EPS);
        Ok(self.derived(Tensor::scalar(-p.ln()), Op::CrossEntropy { probs, label }, &[probs]))
    }

    /// Accumulates `d loss / d node` into every node that requires grad.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(DalError::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut adj);
            adj[i] = Some(g);
        }

        for (node, g) in self.nodes.iter_mut().zip(adj) {
            if let (true, Some(g)) = (node.requires_grad, g) {
                match &mut node.grad {
                    Some(acc) => add_into(acc, &g),
                    None => node.grad = Some(g),
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let val = |id: NodeId| self.nodes[id.0].value.data();
        let mut send = |id: NodeId, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[id.0].requires_grad {
                return;
            }
            let slot = adj[id.0].get_or_insert_with(|| vec![0.0; self.nodes[id.0].value.len()]);
            f(slot);
        };
        match *op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (val(a), val(b));
                send(a, &mut |da| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            da[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                send(b, &mut |db| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let x = av[i * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            for (d, &y) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *d += x * y;
                            }
                        }
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let n = g.len();
                let (xv, wv) = (val(x), val(w));
                send(x, &mut |dx| {
                    for (p, d) in dx.iter_mut().enumerate() {
                        *d += g.iter().zip(&wv[p * n..(p + 1) * n]).map(|(a, b)| a * b).sum::<f64>();
                    }
                });
                send(w, &mut |dw| {
                    for (p, &xp) in xv.iter().enumerate() {
                        for (d, &y) in dw[p * n..(p + 1) * n].iter_mut().zip(g) {
                            *d += xp * y;
                        }
                    }
                });
                send(b, &mut |db| add_into(db, g));
            }
            Op::Add(a, b) => {
                send(a, &mut |d| add_into(d, g));
                send(b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                send(a, &mut |d| add_into(d, g));
                send(b, &mut |d| d.iter_mut().zip(g).for_each(|(d, x)| *d -= x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(a), val(b));
                send(a, &mut |d| {
                    for ((d, x), y) in d.iter_mut().zip(g).zip(bv) {
                        *d += x * y;
                    }
                });
                send(b, &mut |d| {
                    for ((d, x), y) in d.iter_mut().zip(g).zip(av) {
                        *d += x * y;
                    }
                });
            }
            Op::AddRow(a, row) => {
                send(a, &mut |d| add_into(d, g));
                let n = self.nodes[row.0].value.len();
                send(row, &mut |d| {
                    for chunk in g.chunks(n) {
                        add_into(d, chunk);
                    }
                });
            }
            Op::Neg(a) => send(a, &mut |d| d.iter_mut().zip(g).for_each(|(d, x)| *d -= x)),
            Op::Scale(a, c) => send(a, &mut |d| d.iter_mut().zip(g).for_each(|(d, x)| *d += c * x)),
            Op::Sigmoid(a) => send(a, &mut |d| {
                for ((d, x), y) in d.iter_mut().zip(g).zip(out.data()) {
                    *d += x * y * (1.0 - y);
                }
            }),
            Op::Tanh(a) => send(a, &mut |d| {
                for ((d, x), y) in d.iter_mut().zip(g).zip(out.data()) {
                    *d += x * (1.0 - y * y);
                }
            }),
            Op::Relu(a) => {
                let av = val(a);
                send(a, &mut |d| {
                    for ((d, x), &z) in d.iter_mut().zip(g).zip(av) {
                        if z > 0.0 {
                            *d += x;
                        }
                    }
                })
            }
            Op::Exp(a) => send(a, &mut |d| {
                for ((d, x), y) in d.iter_mut().zip(g).zip(out.data()) {
                    *d += x * y;
                }
            }),
            Op::Log(a) => {
                let av = val(a);
                send(a, &mut |d| {
                    for ((d, x), z) in d.iter_mut().zip(g).zip(av) {
                        *d += x / z;
                    }
                })
            }
            Op::Gather(table, ref ids) => {
                let cols = self.nodes[table.0].value.shape()[1];
                send(table, &mut |d| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut d[id * cols..(id + 1) * cols], &g[r * cols..(r + 1) * cols]);
                    }
                });
            }
            Op::MeanRows(a) => {
                let m = self.nodes[a.0].value.shape()[0];
                let inv = 1.0 / m as f64;
                send(a, &mut |d| {
                    for row in d.chunks_mut(g.len()) {
                        for (d, x) in row.iter_mut().zip(g) {
                            *d += x * inv;
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let y = out.data();
                let dot: f64 = g.iter().zip(y).map(|(x, y)| x * y).sum();
                send(a, &mut |d| {
                    for ((d, x), y) in d.iter_mut().zip(g).zip(y) {
                        *d += y * (x - dot);
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let y = out.data();
                let n = out.shape()[1];
                send(a, &mut |d| {
                    for ((d, x), y) in d.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
                        for ((d, x), y) in d.iter_mut().zip(x).zip(y) {
                            *d += y * (x - dot);
                        }
                    }
                });
            }
            Op::Concat(ref parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.len();
                    send(p, &mut |d| add_into(d, &g[off..off + len]));
                    off += len;
                }
            }
            Op::Reshape(a) => send(a, &mut |d| add_into(d, g)),
            Op::Sum(a) => send(a, &mut |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::CrossEntropy { probs, label } => {
                let p = val(probs)[label];
                // Zero gradient inside the clamped region.
                if p > PROB_EPS && p < 1.0 - PROB_EPS {
                    send(probs, &mut |d| d[label] -= g[0] / p);
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Compares reverse-mode gradients of `f` against central finite
/// differences at every coordinate of every parameter and returns the
/// maximum relative error, with denominator `max(|analytic|, |numeric|, 1e-8)`.
///
/// `f` receives a fresh graph and the leaf ids of `params` (in order) and
/// must return a scalar node.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(DalError::InvalidArgument(format!("eps must lie in (0, 1e-2], got {eps}")));
    }
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = ps.iter().map(|p| g.leaf(p.clone(), false)).collect();
        let out = f(&mut g, &ids)?;
        let v = g.value(out).item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(DalError::Evaluation(format!("function returned {v}")))
        }
    };

    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|p| g.leaf(p.clone(), true)).collect();
    let out = f(&mut g, &ids)?;
    if !g.value(out).item().is_finite() {
        return Err(DalError::Evaluation("function value is not finite".into()));
    }
    g.backward(out)?;

    let mut work: Vec<Tensor> = params.to_vec();
    let mut worst = 0.0f64;
    for (pi, id) in ids.iter().enumerate() {
        let analytic = g.grad(*id).data().to_vec();
        for (c, &a) in analytic.iter().enumerate() {
            let orig = work[pi].data()[c];
            work[pi].data_mut()[c] = orig + eps;
            let plus = eval(&work)?;
            work[pi].data_mut()[c] = orig - eps;
            let minus = eval(&work)?;
            work[pi].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::Init;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn random(shape: &[usize], rng: &mut Rng) -> Tensor {
        Tensor::init(shape, Init::Uniform(1.0), rng).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut g = Graph::new();
        let i2 = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let a = g.constant(t(&[2, 2], &[3.0, -1.0, 2.5, 7.0]));
        let c = g.matmul(i2, a).unwrap();
        assert_eq!(g.value(c).data(), &[3.0, -1.0, 2.5, 7.0]);

        let x = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let y = g.constant(t(&[2, 1], &[3.0, 4.0]));
        let z = g.matmul(x, y).unwrap();
        assert_eq!(g.value(z).data(), &[11.0]);
        assert_eq!(g.shape(z), &[1, 1]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]).unwrap());
        let b = g.constant(Tensor::zeros(&[2, 3]).unwrap());
        assert!(matches!(g.matmul(a, b), Err(DalError::ShapeMismatch(_))));
    }

    #[test]
    fn matmul_grad_matches_fd() {
        let mut rng = Rng::new(5);
        let a = random(&[3, 4], &mut rng);
        let b = random(&[4, 2], &mut rng);
        let err = grad_check(
            |g, p| {
                let c = g.matmul(p[0], p[1])?;
                Ok(g.sum(c))
            },
            &[a, b],
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn elementwise_values() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::vector(vec![0.0]).unwrap());
        let s = g.sigmoid(z);
        let th = g.tanh(z);
        assert_eq!(g.value(s).item(), 0.5);
        assert_eq!(g.value(th).item(), 0.0);
        let neg = g.constant(Tensor::vector(vec![1.0, 0.0]).unwrap());
        assert!(matches!(g.log(neg), Err(DalError::Domain(_))));
        let a = g.constant(Tensor::zeros(&[2]).unwrap());
        let b = g.constant(Tensor::zeros(&[3]).unwrap());
        assert!(matches!(g.add(a, b), Err(DalError::ShapeMismatch(_))));
    }

    #[test]
    fn sigmoid_derivative_at_zero() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![0.0]).unwrap(), true);
        let s = g.sigmoid(x);
        let l = g.sum(s);
        g.backward(l).unwrap();
        assert!((g.grad(x).item() - 0.25).abs() < 1e-15);
        let err = grad_check(
            |g, p| {
                let s = g.sigmoid(p[0]);
                Ok(g.sum(s))
            },
            &[Tensor::vector(vec![0.0]).unwrap()],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8);
    }

    #[test]
    fn every_elementwise_op_passes_grad_check() {
        let mut rng = Rng::new(11);
        for trial in 0..100 {
            let x = random(&[2, 3], &mut rng);
            let y = random(&[2, 3], &mut rng);
            let pos = Tensor::new(vec![2, 3], x.data().iter().map(|v| v.abs() + 0.5).collect()).unwrap();
            let c = 0.5 + trial as f64 * 0.01;
            let err = grad_check(
                |g, p| {
                    let a = g.add(p[0], p[1])?;
                    let b = g.sub(a, p[0])?;
                    let m = g.mul(b, p[0])?;
                    let n = g.neg(m);
                    let s = g.scale(n, c);
                    let sg = g.sigmoid(s);
                    let th = g.tanh(p[1]);
                    let r = g.relu(p[0]);
                    let e = g.exp(th);
                    let lg = g.log(p[2])?;
                    let t1 = g.mul(sg, e)?;
                    let t2 = g.add(t1, r)?;
                    let t3 = g.mul(t2, lg)?;
                    Ok(g.sum(t3))
                },
                &[x, y, pos],
                1e-6,
            )
            .unwrap();
            assert!(err <= 1e-4, "trial {trial}: {err}");
        }
    }

    #[test]
    fn linear_matches_matmul_composition_and_fd() {
        let mut rng = Rng::new(21);
        let (x, w, b) = (random(&[3], &mut rng), random(&[3, 4], &mut rng), random(&[4], &mut rng));
        let mut g = Graph::new();
        let (xi, wi, bi) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
        let fused = g.linear(xi, wi, bi).unwrap();
        let row = g.reshape(xi, &[1, 3]).unwrap();
        let m = g.matmul(row, wi).unwrap();
        let m = g.reshape(m, &[4]).unwrap();
        let composed = g.add(m, bi).unwrap();
        for (a, c) in g.value(fused).data().iter().zip(g.value(composed).data()) {
            assert!((a - c).abs() < 1e-15);
        }
        let err = grad_check(
            |g, p| {
                let y = g.linear(p[0], p[1], p[2])?;
                let t = g.tanh(y);
                Ok(g.sum(t))
            },
            &[x, w, b],
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-6, "{err}");
        let mut g = Graph::new();
        let (a, c) = (g.constant(t(&[2], &[1.0, 2.0])), g.constant(t(&[3, 1], &[1.0, 2.0, 3.0])));
        assert!(matches!(g.linear(a, c, a), Err(DalError::ShapeMismatch(_))));
    }

    #[test]
    fn softmax_rows_normalises_each_row_and_checks() {
        let mut rng = Rng::new(22);
        let x = random(&[3, 4], &mut rng);
        let mut g = Graph::new();
        let xi = g.constant(x.clone());
        let s = g.softmax_rows(xi).unwrap();
        let rows = g.value(s).data().to_vec();
        for (r, row) in rows.chunks(4).enumerate() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let single = g.constant(Tensor::vector(x.row(r).to_vec()).unwrap());
            let single = g.softmax(single).unwrap();
            assert_eq!(g.value(single).data(), row);
        }
        let weights = random(&[3, 4], &mut rng);
        let err = grad_check(
            |g, p| {
                let s = g.softmax_rows(p[0])?;
                let m = g.mul(s, p[1])?;
                Ok(g.sum(m))
            },
            &[x, weights],
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn mean_rows_values_and_grad() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[2, 2], &[1.0, 3.0, 3.0, 5.0]), true);
        let m = g.mean_rows(a).unwrap();
        assert_eq!(g.value(m).data(), &[2.0, 4.0]);
        let l = g.sum(m);
        g.backward(l).unwrap();
        assert_eq!(g.grad(a).data(), &[0.5; 4]);

        let single = g.constant(t(&[1, 2], &[7.0, 9.0]));
        let ms = g.mean_rows(single).unwrap();
        assert_eq!(g.value(ms).data(), &[7.0, 9.0]);
    }

    #[test]
    fn softmax_values_and_jacobian() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::vector(vec![0.0, 0.0]).unwrap());
        let s = g.softmax(z).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
        let c = g.constant(Tensor::vector(vec![123.0; 3]).unwrap());
        let sc = g.softmax(c).unwrap();
        for &p in g.value(sc).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }

        let mut rng = Rng::new(3);
        for _ in 0..20 {
            let x = random(&[5], &mut rng);
            let w = random(&[5], &mut rng);
            // A random linear functional of the output probes the full Jacobian.
            let err = grad_check(
                |g, p| {
                    let s = g.softmax(p[0])?;
                    let m = g.mul(s, p[1])?;
                    Ok(g.sum(m))
                },
                &[x, w],
                1e-6,
            )
            .unwrap();
            assert!(err <= 1e-6, "{err}");
        }
    }

    #[test]
    fn concat_and_split_grads() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::vector(vec![1.0]).unwrap(), true);
        let b = g.leaf(Tensor::vector(vec![2.0, 3.0]).unwrap(), true);
        let c = g.concat(&[a, b]).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0]);
        let only = g.concat(&[b]).unwrap();
        assert_eq!(g.value(only).data(), &[2.0, 3.0]);
        let l = g.sum(c);
        g.backward(l).unwrap();
        assert_eq!(g.grad(a).data(), &[1.0]);
        assert_eq!(g.grad(b).data(), &[1.0, 1.0]);
        assert!(matches!(g.concat(&[]), Err(DalError::InvalidArgument(_))));
    }

    #[test]
    fn cross_entropy_cases() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::vector(vec![0.0, 1.0]).unwrap());
        let l = g.cross_entropy(p, 1).unwrap();
        assert!(g.value(l).item() < 1e-11);
        let h = g.constant(Tensor::vector(vec![0.5, 0.5]).unwrap());
        let l = g.cross_entropy(h, 1).unwrap();
        assert!((g.value(l).item() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(matches!(g.cross_entropy(h, 2), Err(DalError::InvalidLabel(2))));
        // Clamped to 1e-12 rather than infinite.
        let l = g.cross_entropy(p, 0).unwrap();
        assert!((g.value(l).item() - (-(1e-12f64).ln())).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_logit_gradient_is_softmax_minus_onehot() {
        let mut rng = Rng::new(8);
        for label in 0..2 {
            let z = random(&[2], &mut rng);
            let mut g = Graph::new();
            let x = g.leaf(z.clone(), true);
            let p = g.softmax(x).unwrap();
            let l = g.cross_entropy(p, label).unwrap();
            g.backward(l).unwrap();
            let probs = g.value(p).data().to_vec();
            for k in 0..2 {
                let expect = probs[k] - if k == label { 1.0 } else { 0.0 };
                assert!((g.grad(x).data()[k] - expect).abs() < 1e-12);
            }
            let err = grad_check(
                |g, p| {
                    let s = g.softmax(p[0])?;
                    g.cross_entropy(s, label)
                },
                &[z],
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-6);
        }
    }

    #[test]
    fn backward_square_and_accumulation() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0), true);
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).item(), 6.0);
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).item(), 12.0);
        g.zero_grads();
        assert_eq!(g.grad(x).item(), 0.0);
    }

    #[test]
    fn frozen_leaf_gets_no_grad() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap(), false);
        let w = g.leaf(Tensor::vector(vec![3.0, 4.0]).unwrap(), true);
        let p = g.mul(x, w).unwrap();
        let l = g.sum(p);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).data(), &[0.0, 0.0]);
        assert_eq!(g.grad(w).data(), &[1.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap(), true);
        assert!(matches!(g.backward(x), Err(DalError::InvalidArgument(_))));
    }

    #[test]
    fn three_layer_mlp_grads_match_fd() {
        let mut rng = Rng::new(21);
        let params = vec![
            random(&[1, 4], &mut rng),
            random(&[4, 6], &mut rng),
            random(&[6], &mut rng),
            random(&[6, 5], &mut rng),
            random(&[5], &mut rng),
            random(&[5, 2], &mut rng),
        ];
        let err = grad_check(
            |g, p| {
                let h = g.matmul(p[0], p[1])?;
                let h = g.add_row(h, p[2])?;
                let h = g.tanh(h);
                let h = g.matmul(h, p[3])?;
                let h = g.add_row(h, p[4])?;
                let h = g.relu(h);
                let o = g.matmul(h, p[5])?;
                let o = g.reshape(o, &[2])?;
                let s = g.softmax(o)?;
                g.cross_entropy(s, 1)
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn gather_rows_scatters_grad() {
        let mut g = Graph::new();
        let table = g.leaf(t(&[4, 2], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]), true);
        let rows = g.gather_rows(table, &[3, 3]).unwrap();
        assert_eq!(g.value(rows).data(), &[6.0, 7.0, 6.0, 7.0]);
        let l = g.sum(rows);
        g.backward(l).unwrap();
        assert_eq!(g.grad(table).data(), &[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 2.0, 2.0]);
        assert!(matches!(g.gather_rows(table, &[4]), Err(DalError::Validation(_))));
    }

    #[test]
    fn linear_function_checks_exactly() {
        let err = grad_check(
            |g, p| {
                let s = g.scale(p[0], 2.5);
                Ok(g.sum(s))
            },
            &[Tensor::vector(vec![0.3, -1.2, 4.0]).unwrap()],
            1e-3,
        )
        .unwrap();
        assert!(err <= 1e-9, "{err}");
        let err = grad_check(
            |g, p| {
                let sq = g.mul(p[0], p[0])?;
                Ok(g.sum(sq))
            },
            &[Tensor::scalar(3.0)],
            1e-3,
        )
        .unwrap();
        assert!(err <= 1e-8, "{err}");
    }

    #[test]
    fn grad_check_rejects_bad_eps() {
        let f = |g: &mut Graph, p: &[NodeId]| Ok(g.sum(p[0]));
        assert!(grad_check(f, &[Tensor::scalar(1.0)], 0.0).is_err());
        assert!(grad_check(f, &[Tensor::scalar(1.0)], 0.1).is_err());
    }

    #[test]
    fn truncate_keeps_earlier_nodes() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::scalar(2.0), true);
        let mark = g.len();
        let b = g.scale(a, 3.0);
        assert_eq!(g.value(b).item(), 6.0);
        g.truncate(mark);
        assert_eq!(g.len(), 1);
        let c = g.scale(a, 4.0);
        g.backward(c).unwrap();
        assert_eq!(g.grad(a).item(), 4.0);
    }
}
