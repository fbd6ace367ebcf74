//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] records every operation as it is evaluated. Parameters are
//! borrowed from their [`ParamStore`] rather than copied; [`Graph::backward`]
//! walks the tape in reverse and returns the gradients of the trainable
//! parameters as a [`Gradients`] value, which the owning stores then absorb
//! with [`ParamStore::accumulate`].
//!
//! Nodes are created in evaluation order, so the tape index is already a
//! topological order.

use std::borrow::Cow;
use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::tensor::{matmul_acc, matmul_at_acc, matmul_bt_acc, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// A parameter store together with whether gradients should flow into it.
#[derive(Clone, Copy)]
pub struct Binding<'a> {
    pub store: &'a ParamStore,
    pub trainable: bool,
}

impl<'a> Binding<'a> {
    pub fn trainable(store: &'a ParamStore) -> Self {
        Self {
            store,
            trainable: true,
        }
    }

    pub fn frozen(store: &'a ParamStore) -> Self {
        Self {
            store,
            trainable: false,
        }
    }
}

struct AttentionSaved {
    q: NodeId,
    k: NodeId,
    v: NodeId,
    mask: Vec<bool>,
    heads: usize,
    head_dim: usize,
    q_len: usize,
    k_len: usize,
    probs: Vec<f64>,
}

enum Op {
    Leaf,
    Param { owner: usize, id: ParamId },
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Relu(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Square(NodeId),
    Abs(NodeId),
    Clamp(NodeId, f64, f64),
    SumAll(NodeId),
    MeanAll(NodeId),
    SumCols(NodeId),
    ConcatCols(Vec<NodeId>),
    SliceCols(NodeId, usize),
    ConcatRows(Vec<NodeId>),
    GatherRows(NodeId, Vec<usize>),
    Reshape(NodeId),
    Attention(Box<AttentionSaved>),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Gradients of trainable parameters, keyed by store namespace and id.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    entries: Vec<(String, ParamId, Tensor)>,
}

impl Gradients {
    pub fn entries(&self) -> impl Iterator<Item = (&str, ParamId, &Tensor)> {
        self.entries.iter().map(|(ns, id, t)| (ns.as_str(), *id, t))
    }

    pub fn get(&self, namespace: &str, id: ParamId) -> Option<&Tensor> {
        self.entries
            .iter()
            .find(|(ns, i, _)| ns == namespace && *i == id)
            .map(|(_, _, t)| t)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Namespaces that received at least one gradient entry.
    pub fn namespaces(&self) -> Vec<&str> {
        let mut v: Vec<&str> = self.entries.iter().map(|(ns, _, _)| ns.as_str()).collect();
        v.sort_unstable();
        v.dedup();
        v
    }
}

/// The recording tape.
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    owners: Vec<&'a ParamStore>,
    cache: HashMap<(usize, ParamId, bool), NodeId>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_len(a: &Tensor, b: &Tensor, op: &str) {
    assert!(
        a.shape() == b.shape(),
        "{op}: shape mismatch {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            owners: Vec::new(),
            cache: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push_owned(&mut self, value: Tensor, op: Op, parents: &[NodeId]) -> NodeId {
        let needs = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.push(Cow::Owned(value), op, needs)
    }

    pub fn value(&self, n: NodeId) -> &Tensor {
        &self.nodes[n.0].value
    }

    pub fn scalar(&self, n: NodeId) -> f64 {
        self.nodes[n.0].value.item()
    }

    pub fn requires_grad(&self, n: NodeId) -> bool {
        self.nodes[n.0].needs_grad
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Cow::Owned(value), Op::Leaf, false)
    }

    /// Loads a parameter without copying it. Repeated loads of the same
    /// parameter with the same trainability return the same node.
    pub fn load(&mut self, binding: Binding<'a>, id: ParamId) -> NodeId {
        let key = (binding.store as *const ParamStore as usize, id, binding.trainable);
        if let Some(&n) = self.cache.get(&key) {
            return n;
        }
        let value = Cow::Borrowed(binding.store.value(id));
        let n = if binding.trainable {
            let owner = match self
                .owners
                .iter()
                .position(|s| std::ptr::eq(*s, binding.store))
            {
                Some(i) => i,
                None => {
                    self.owners.push(binding.store);
                    self.owners.len() - 1
                }
            };
            self.push(value, Op::Param { owner, id }, true)
        } else {
            self.push(value, Op::Leaf, false)
        };
        self.cache.insert(key, n);
        n
    }

    pub fn param(&mut self, store: &'a ParamStore, id: ParamId) -> NodeId {
        self.load(Binding::trainable(store), id)
    }

    pub fn frozen(&mut self, store: &'a ParamStore, id: ParamId) -> NodeId {
        self.load(Binding::frozen(store), id)
    }

    /// A constant copy of `n`'s current value; gradients stop here.
    pub fn detach(&mut self, n: NodeId) -> NodeId {
        let v = self.value(n).clone();
        self.constant(v)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        let (n, k) = (av.rows(), av.cols());
        let m = bv.cols();
        assert!(
            bv.rows() == k,
            "matmul: inner dims {:?} x {:?}",
            av.shape(),
            bv.shape()
        );
        let mut out = vec![0.0; n * m];
        matmul_acc(av.data(), bv.data(), &mut out, n, k, m);
        self.push_owned(Tensor::from_parts(n, m, out), Op::MatMul(a, b), &[a, b])
    }

    fn zip_op(&mut self, a: NodeId, b: NodeId, name: &str, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (av, bv) = (self.value(a), self.value(b));
        same_len(av, bv, name);
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(av.shape().to_vec(), data).expect("shape preserved")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let t = self.zip_op(a, b, "add", |x, y| x + y);
        self.push_owned(t, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let t = self.zip_op(a, b, "sub", |x, y| x - y);
        self.push_owned(t, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let t = self.zip_op(a, b, "mul", |x, y| x * y);
        self.push_owned(t, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let t = self.zip_op(a, b, "div", |x, y| x / y);
        self.push_owned(t, Op::Div(a, b), &[a, b])
    }

    /// Adds the single row `b` to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        let m = av.cols();
        assert!(bv.len() == m, "add_row: {:?} + {:?}", av.shape(), bv.shape());
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(m.max(1)) {
            for (x, y) in row.iter_mut().zip(bv.data()) {
                *x += y;
            }
        }
        let t = Tensor::new(av.shape().to_vec(), data).expect("shape preserved");
        self.push_owned(t, Op::AddRow(a, b), &[a, b])
    }

    fn map_op(&mut self, a: NodeId, f: impl Fn(f64) -> f64) -> Tensor {
        let av = self.value(a);
        let data = av.data().iter().map(|x| f(*x)).collect();
        Tensor::new(av.shape().to_vec(), data).expect("shape preserved")
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let t = self.map_op(a, |x| x * c);
        self.push_owned(t, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let t = self.map_op(a, |x| x + c);
        self.push_owned(t, Op::AddScalar(a), &[a])
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.scale(a, -1.0)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let t = self.map_op(a, |x| if x > 0.0 { x } else { 0.0 });
        self.push_owned(t, Op::Relu(a), &[a])
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let t = self.map_op(a, f64::tanh);
        self.push_owned(t, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let t = self.map_op(a, sigmoid);
        self.push_owned(t, Op::Sigmoid(a), &[a])
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let t = self.map_op(a, f64::exp);
        self.push_owned(t, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let t = self.map_op(a, f64::ln);
        self.push_owned(t, Op::Log(a), &[a])
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let t = self.map_op(a, |x| x * x);
        self.push_owned(t, Op::Square(a), &[a])
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let t = self.map_op(a, f64::abs);
        self.push_owned(t, Op::Abs(a), &[a])
    }

    /// Hard clamp; the gradient is zero wherever the clamp is active.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let t = self.map_op(a, |x| x.clamp(lo, hi));
        self.push_owned(t, Op::Clamp(a, lo, hi), &[a])
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().sum();
        self.push_owned(Tensor::scalar(s), Op::SumAll(a), &[a])
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let n = av.len().max(1) as f64;
        let s: f64 = av.data().iter().sum();
        self.push_owned(Tensor::scalar(s / n), Op::MeanAll(a), &[a])
    }

    /// Row sums: `[n, m] -> [n, 1]`.
    pub fn sum_cols(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let (n, m) = (av.rows(), av.cols());
        let data = (0..n)
            .map(|r| av.data()[r * m..(r + 1) * m].iter().sum())
            .collect();
        self.push_owned(Tensor::from_parts(n, 1, data), Op::SumCols(a), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_cols: no inputs");
        let n = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).cols()).collect();
        for p in parts {
            assert!(
                self.value(*p).rows() == n,
                "concat_cols: row mismatch {:?}",
                self.value(*p).shape()
            );
        }
        let m: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * m);
        for r in 0..n {
            for (p, w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(*p).data()[r * w..(r + 1) * w]);
            }
        }
        self.push_owned(Tensor::from_parts(n, m, data), Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let av = self.value(a);
        let (n, m) = (av.rows(), av.cols());
        assert!(start + len <= m, "slice_cols: {start}+{len} > {m}");
        let mut data = Vec::with_capacity(n * len);
        for r in 0..n {
            data.extend_from_slice(&av.data()[r * m + start..r * m + start + len]);
        }
        self.push_owned(Tensor::from_parts(n, len, data), Op::SliceCols(a, start), &[a])
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_rows: no inputs");
        let m = self.value(parts[0]).cols();
        let mut data = Vec::new();
        for p in parts {
            let v = self.value(*p);
            assert!(v.cols() == m, "concat_rows: col mismatch {:?}", v.shape());
            data.extend_from_slice(v.data());
        }
        let n = data.len() / m.max(1);
        self.push_owned(Tensor::from_parts(n, m, data), Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Selects (and possibly repeats) rows of `a`.
    pub fn gather_rows(&mut self, a: NodeId, idx: &[usize]) -> NodeId {
        let av = self.value(a);
        let m = av.cols();
        let mut data = Vec::with_capacity(idx.len() * m);
        for &i in idx {
            data.extend_from_slice(av.row_slice(i));
        }
        self.push_owned(
            Tensor::from_parts(idx.len(), m, data),
            Op::GatherRows(a, idx.to_vec()),
            &[a],
        )
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let t = self
            .value(a)
            .clone()
            .reshape(shape.to_vec())
            .expect("reshape: element count mismatch");
        self.push_owned(t, Op::Reshape(a), &[a])
    }

    /// Masked multi-head dot-product attention over groups.
    ///
    /// `q` is `[groups * q_len, heads * head_dim]`, `k` and `v` are
    /// `[groups * k_len, heads * head_dim]`, `mask` has `groups * k_len`
    /// entries. A query whose group has no valid key produces zeros.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        mask: &[bool],
        heads: usize,
        q_len: usize,
        k_len: usize,
    ) -> NodeId {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let width = qv.cols();
        assert!(heads > 0 && width % heads == 0, "attention: width {width} not divisible by {heads} heads");
        let head_dim = width / heads;
        let groups = qv.rows() / q_len;
        assert_eq!(qv.rows(), groups * q_len, "attention: query rows");
        assert_eq!(kv.rows(), groups * k_len, "attention: key rows");
        assert_eq!(vv.rows(), groups * k_len, "attention: value rows");
        assert_eq!(kv.cols(), width);
        assert_eq!(vv.cols(), width);
        assert_eq!(mask.len(), groups * k_len, "attention: mask length");
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut out = vec![0.0; groups * q_len * width];
        let mut probs = vec![0.0; groups * heads * q_len * k_len];
        let mut scores = vec![0.0; k_len];
        for g in 0..groups {
            let gm = &mask[g * k_len..(g + 1) * k_len];
            if !gm.iter().any(|&b| b) {
                continue;
            }
            for h in 0..heads {
                let off = h * head_dim;
                for i in 0..q_len {
                    let qrow = &qv.data()[(g * q_len + i) * width + off..][..head_dim];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..k_len {
                        if !gm[j] {
                            continue;
                        }
                        let krow = &kv.data()[(g * k_len + j) * width + off..][..head_dim];
                        let s = qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>() * scale;
                        scores[j] = s;
                        max = max.max(s);
                    }
                    let p = &mut probs[((g * heads + h) * q_len + i) * k_len..][..k_len];
                    let mut z = 0.0;
                    for j in 0..k_len {
                        if gm[j] {
                            p[j] = (scores[j] - max).exp();
                            z += p[j];
                        }
                    }
                    let orow = &mut out[(g * q_len + i) * width + off..][..head_dim];
                    for j in 0..k_len {
                        if !gm[j] {
                            continue;
                        }
                        p[j] /= z;
                        let vrow = &vv.data()[(g * k_len + j) * width + off..][..head_dim];
                        for (o, x) in orow.iter_mut().zip(vrow) {
                            *o += p[j] * x;
                        }
                    }
                }
            }
        }
        let saved = AttentionSaved {
            q,
            k,
            v,
            mask: mask.to_vec(),
            heads,
            head_dim,
            q_len,
            k_len,
            probs,
        };
        self.push_owned(
            Tensor::from_parts(groups * q_len, width, out),
            Op::Attention(Box::new(saved)),
            &[q, k, v],
        )
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        if !root.needs_grad {
            return Err(Error::DetachedGraph);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let y = node.value.data();
            match &node.op {
                Op::Leaf => {}
                Op::Param { owner, id } => {
                    let shape = node.value.shape().to_vec();
                    out.entries.push((
                        self.owners[*owner].namespace().to_string(),
                        *id,
                        Tensor::new(shape, g).expect("gradient shape"),
                    ));
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (n, k, m) = (av.rows(), av.cols(), bv.cols());
                    if let Some(da) = self.slot(&mut grads, *a) {
                        matmul_bt_acc(&g, bv.data(), da, n, k, m);
                    }
                    if let Some(db) = self.slot(&mut grads, *b) {
                        matmul_at_acc(av.data(), &g, db, n, k, m);
                    }
                }
                Op::Add(a, b) => {
                    self.acc_map(&mut grads, *a, &g, |gi, _| gi);
                    self.acc_map(&mut grads, *b, &g, |gi, _| gi);
                }
                Op::Sub(a, b) => {
                    self.acc_map(&mut grads, *a, &g, |gi, _| gi);
                    self.acc_map(&mut grads, *b, &g, |gi, _| -gi);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    self.acc_map(&mut grads, *a, &g, |gi, j| gi * bv[j]);
                    self.acc_map(&mut grads, *b, &g, |gi, j| gi * av[j]);
                }
                Op::Div(a, b) => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    self.acc_map(&mut grads, *a, &g, |gi, j| gi / bv[j]);
                    self.acc_map(&mut grads, *b, &g, |gi, j| -gi * av[j] / (bv[j] * bv[j]));
                }
                Op::AddRow(a, b) => {
                    self.acc_map(&mut grads, *a, &g, |gi, _| gi);
                    let m = self.value(*b).len();
                    if let Some(db) = self.slot(&mut grads, *b) {
                        for row in g.chunks(m.max(1)) {
                            for (d, x) in db.iter_mut().zip(row) {
                                *d += x;
                            }
                        }
                    }
                }
                Op::Scale(a, c) => self.acc_map(&mut grads, *a, &g, |gi, _| gi * c),
                Op::AddScalar(a) => self.acc_map(&mut grads, *a, &g, |gi, _| gi),
                Op::Relu(a) => {
                    let x = self.value(*a).data();
                    self.acc_map(&mut grads, *a, &g, |gi, j| if x[j] > 0.0 { gi } else { 0.0 });
                }
                Op::Tanh(a) => self.acc_map(&mut grads, *a, &g, |gi, j| gi * (1.0 - y[j] * y[j])),
                Op::Sigmoid(a) => self.acc_map(&mut grads, *a, &g, |gi, j| gi * y[j] * (1.0 - y[j])),
                Op::Exp(a) => self.acc_map(&mut grads, *a, &g, |gi, j| gi * y[j]),
                Op::Log(a) => {
                    let x = self.value(*a).data();
                    self.acc_map(&mut grads, *a, &g, |gi, j| gi / x[j]);
                }
                Op::Square(a) => {
                    let x = self.value(*a).data();
                    self.acc_map(&mut grads, *a, &g, |gi, j| 2.0 * gi * x[j]);
                }
                Op::Abs(a) => {
                    let x = self.value(*a).data();
                    self.acc_map(&mut grads, *a, &g, |gi, j| {
                        if x[j] > 0.0 {
                            gi
                        } else if x[j] < 0.0 {
                            -gi
                        } else {
                            0.0
                        }
                    });
                }
                Op::Clamp(a, lo, hi) => {
                    let x = self.value(*a).data();
                    self.acc_map(&mut grads, *a, &g, |gi, j| {
                        if x[j] >= *lo && x[j] <= *hi {
                            gi
                        } else {
                            0.0
                        }
                    });
                }
                Op::SumAll(a) => {
                    if let Some(d) = self.slot(&mut grads, *a) {
                        d.iter_mut().for_each(|x| *x += g[0]);
                    }
                }
                Op::MeanAll(a) => {
                    if let Some(d) = self.slot(&mut grads, *a) {
                        let n = d.len().max(1) as f64;
                        d.iter_mut().for_each(|x| *x += g[0] / n);
                    }
                }
                Op::SumCols(a) => {
                    let m = self.value(*a).cols().max(1);
                    if let Some(d) = self.slot(&mut grads, *a) {
                        for (j, x) in d.iter_mut().enumerate() {
                            *x += g[j / m];
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let n = node.value.rows();
                    let total = node.value.cols();
                    let mut off = 0;
                    for p in parts {
                        let w = self.value(*p).cols();
                        if let Some(dp) = self.slot(&mut grads, *p) {
                            for r in 0..n {
                                for c in 0..w {
                                    dp[r * w + c] += g[r * total + off + c];
                                }
                            }
                        }
                        off += w;
                    }
                }
                Op::SliceCols(a, start) => {
                    let m = self.value(*a).cols();
                    let w = node.value.cols();
                    let n = node.value.rows();
                    if let Some(da) = self.slot(&mut grads, *a) {
                        for r in 0..n {
                            for c in 0..w {
                                da[r * m + start + c] += g[r * w + c];
                            }
                        }
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let len = self.value(*p).len();
                        if let Some(dp) = self.slot(&mut grads, *p) {
                            for (d, x) in dp.iter_mut().zip(&g[off..off + len]) {
                                *d += x;
                            }
                        }
                        off += len;
                    }
                }
                Op::GatherRows(a, idx) => {
                    let m = self.value(*a).cols();
                    if let Some(da) = self.slot(&mut grads, *a) {
                        for (r, &src) in idx.iter().enumerate() {
                            for c in 0..m {
                                da[src * m + c] += g[r * m + c];
                            }
                        }
                    }
                }
                Op::Reshape(a) => self.acc_map(&mut grads, *a, &g, |gi, _| gi),
                Op::Attention(s) => self.attention_backward(&mut grads, s, &g),
            }
        }
        Ok(out)
    }

    /// Gradient buffer for `n`, or `None` if nothing upstream needs it.
    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], n: NodeId) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[n.0].needs_grad {
            return None;
        }
        let len = self.nodes[n.0].value.len();
        Some(grads[n.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn acc_map(
        &self,
        grads: &mut [Option<Vec<f64>>],
        n: NodeId,
        g: &[f64],
        f: impl Fn(f64, usize) -> f64,
    ) {
        if let Some(d) = self.slot(grads, n) {
            for (j, (di, gi)) in d.iter_mut().zip(g).enumerate() {
                *di += f(*gi, j);
            }
        }
    }

    fn attention_backward(&self, grads: &mut [Option<Vec<f64>>], s: &AttentionSaved, g: &[f64]) {
        let (qv, kv, vv) = (self.value(s.q), self.value(s.k), self.value(s.v));
        let width = s.heads * s.head_dim;
        let groups = qv.rows() / s.q_len;
        let scale = 1.0 / (s.head_dim as f64).sqrt();
        let mut dq = vec![0.0; qv.len()];
        let mut dk = vec![0.0; kv.len()];
        let mut dv = vec![0.0; vv.len()];
        let mut dp = vec![0.0; s.k_len];
        for grp in 0..groups {
            let gm = &s.mask[grp * s.k_len..(grp + 1) * s.k_len];
            if !gm.iter().any(|&b| b) {
                continue;
            }
            for h in 0..s.heads {
                let off = h * s.head_dim;
                for i in 0..s.q_len {
                    let p = &s.probs[((grp * s.heads + h) * s.q_len + i) * s.k_len..][..s.k_len];
                    let go = &g[(grp * s.q_len + i) * width + off..][..s.head_dim];
                    let mut dot = 0.0;
                    for j in 0..s.k_len {
                        if !gm[j] {
                            continue;
                        }
                        let vb = (grp * s.k_len + j) * width + off;
                        let vrow = &vv.data()[vb..vb + s.head_dim];
                        dp[j] = go.iter().zip(vrow).map(|(a, b)| a * b).sum();
                        dot += p[j] * dp[j];
                        for (d, x) in dv[vb..vb + s.head_dim].iter_mut().zip(go) {
                            *d += p[j] * x;
                        }
                    }
                    let qb = (grp * s.q_len + i) * width + off;
                    for j in 0..s.k_len {
                        if !gm[j] {
                            continue;
                        }
                        let ds = p[j] * (dp[j] - dot) * scale;
                        let kb = (grp * s.k_len + j) * width + off;
                        for c in 0..s.head_dim {
                            dq[qb + c] += ds * kv.data()[kb + c];
                            dk[kb + c] += ds * qv.data()[qb + c];
                        }
                    }
                }
            }
        }
        for (n, d) in [(s.q, dq), (s.k, dk), (s.v, dv)] {
            if let Some(slot) = self.slot(grads, n) {
                for (a, b) in slot.iter_mut().zip(&d) {
                    *a += b;
                }
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
