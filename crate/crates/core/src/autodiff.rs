//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation as a node appended after its inputs,
//! so node order is already a topological order and the graph is acyclic by
//! construction. [`Graph::backward`] walks the nodes in reverse, applying each
//! operation's analytic rule and summing contributions whenever a node feeds
//! more than one consumer.
//!
//! Leaves come in three flavours:
//!
//! * [`Graph::param`] borrows a long-lived tensor (a model weight). Binding
//!   the same tensor twice returns the same node, so a weight shared by many
//!   sub-expressions accumulates one combined gradient.
//! * [`Graph::variable`] owns a tensor that should receive a gradient.
//! * [`Graph::constant`] owns a tensor that never does.
//!
//! ```
//! use scaffold_core::autodiff::Graph;
//! use scaffold_core::tensor::Tensor;
//!
//! let mut g = Graph::new();
//! let x = g.variable(Tensor::vector(vec![1.0, 2.0]));
//! let y = g.mul(x, x).unwrap();
//! let loss = g.sum(y);
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
//! ```

use std::borrow::Cow;
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Tanh,
    Sigmoid,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    MatVec(NodeId, NodeId),
    VecMat(NodeId, NodeId),
    Binary(Binary, NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Scale(NodeId, f64),
    Unary(Unary, NodeId),
    Softmax(NodeId),
    Concat(NodeId, NodeId),
    Row(NodeId, usize),
    Stack(Vec<NodeId>),
    Gather(NodeId, Vec<usize>),
    Sum(NodeId),
    AddN(Vec<NodeId>),
    CrossEntropy {
        logits: NodeId,
        gold: usize,
        probs: Vec<f64>,
    },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// A computation graph recorded during a forward pass.
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    leaf_grads: HashMap<usize, Vec<f64>>,
    bound: HashMap<*const Tensor, NodeId>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            leaf_grads: HashMap::new(),
            bound: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op, inputs: &[NodeId]) -> NodeId {
        let rg = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.push(Cow::Owned(value), op, rg)
    }

    /// Binds a borrowed trainable tensor. Repeated binds of the same tensor
    /// return the same leaf.
    pub fn param(&mut self, t: &'a Tensor) -> NodeId {
        let key = t as *const Tensor;
        if let Some(&id) = self.bound.get(&key) {
            return id;
        }
        let id = self.push(Cow::Borrowed(t), Op::Leaf, true);
        self.bound.insert(key, id);
        id
    }

    /// Binds a borrowed tensor that does not receive gradients.
    pub fn constant_ref(&mut self, t: &'a Tensor) -> NodeId {
        self.push(Cow::Borrowed(t), Op::Leaf, false)
    }

    pub fn variable(&mut self, t: Tensor) -> NodeId {
        self.push(Cow::Owned(t), Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn dim_err(&self, op: &'static str, a: NodeId, b: NodeId) -> Error {
        Error::Dimension {
            op,
            left: self.shape(a).to_vec(),
            right: self.shape(b).to_vec(),
        }
    }

    /// Matrix product `[m×k] · [k×n] → [m×n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(self.dim_err("matmul", a, b));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push_op(t, Op::MatMul(a, b), &[a, b]))
    }

    /// Matrix-vector product `[m×k] · [k] → [m]`.
    pub fn matvec(&mut self, w: NodeId, v: NodeId) -> Result<NodeId> {
        let (sw, sv) = (self.shape(w), self.shape(v));
        if sw.len() != 2 || sv.len() != 1 || sw[1] != sv[0] {
            return Err(self.dim_err("matvec", w, v));
        }
        let (m, k) = (sw[0], sw[1]);
        let wd = self.value(w).data();
        let vd = self.value(v).data();
        let out: Vec<f64> = (0..m)
            .map(|i| dot(&wd[i * k..(i + 1) * k], vd))
            .collect();
        Ok(self.push_op(Tensor::vector(out), Op::MatVec(w, v), &[w, v]))
    }

    /// Vector-matrix product `[k] · [k×n] → [n]`.
    pub fn vecmat(&mut self, v: NodeId, w: NodeId) -> Result<NodeId> {
        let (sv, sw) = (self.shape(v), self.shape(w));
        if sw.len() != 2 || sv.len() != 1 || sw[0] != sv[0] {
            return Err(self.dim_err("vecmat", v, w));
        }
        let (k, n) = (sw[0], sw[1]);
        let wd = self.value(w).data();
        let vd = self.value(v).data();
        let mut out = vec![0.0; n];
        for (i, &vi) in vd.iter().enumerate().take(k) {
            for (o, &x) in out.iter_mut().zip(&wd[i * n..(i + 1) * n]) {
                *o += vi * x;
            }
        }
        Ok(self.push_op(Tensor::vector(out), Op::VecMat(v, w), &[v, w]))
    }

    /// Same-shape pointwise binary operation.
    pub fn binary(&mut self, op: Binary, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(self.dim_err("elementwise", a, b));
        }
        let f = match op {
            Binary::Add => |x: f64, y: f64| x + y,
            Binary::Sub => |x: f64, y: f64| x - y,
            Binary::Mul => |x: f64, y: f64| x * y,
        };
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push_op(t, Op::Binary(op, a, b), &[a, b]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Mul, a, b)
    }

    /// Adds a bias vector along the last axis; the only broadcast supported.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sb.len() != 1 || sx.last() != Some(&sb[0]) {
            return Err(self.dim_err("add_bias", x, bias));
        }
        let n = sb[0];
        let bd = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bd[i % n])
            .collect();
        let t = Tensor::new(sx.to_vec(), data)?;
        Ok(self.push_op(t, Op::AddBias(x, bias), &[x, bias]))
    }

    /// Multiplies by a fixed scalar.
    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| a * c).collect();
        let t = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        self.push_op(t, Op::Scale(x, c), &[x])
    }

    pub fn unary(&mut self, op: Unary, x: NodeId) -> NodeId {
        let v = self.value(x);
        let data = v
            .data()
            .iter()
            .map(|&a| match op {
                Unary::Tanh => a.tanh(),
                Unary::Sigmoid => sigmoid(a),
                Unary::Relu => a.max(0.0),
            })
            .collect();
        let t = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        self.push_op(t, Op::Unary(op, x), &[x])
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.unary(Unary::Tanh, x)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(Unary::Relu, x)
    }

    /// Softmax over each slice of the last axis, max-shifted for stability.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let n = v.last_dim();
        if n == 0 {
            return Err(Error::contract("softmax over an empty axis"));
        }
        let mut data = v.data().to_vec();
        for slice in data.chunks_mut(n) {
            softmax_in_place(slice);
        }
        let t = Tensor::new(v.shape().to_vec(), data)?;
        Ok(self.push_op(t, Op::Softmax(x), &[x]))
    }

    /// Concatenates along the last axis; all other axes must agree.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != sb.len() || sa.is_empty() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(self.dim_err("concat", a, b));
        }
        let (na, nb) = (sa[sa.len() - 1], sb[sb.len() - 1]);
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = na + nb;
        let outer: usize = sa[..sa.len() - 1].iter().product();
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(outer * (na + nb));
        for r in 0..outer {
            data.extend_from_slice(&da[r * na..(r + 1) * na]);
            data.extend_from_slice(&db[r * nb..(r + 1) * nb]);
        }
        let t = Tensor::new(shape, data)?;
        Ok(self.push_op(t, Op::Concat(a, b), &[a, b]))
    }

    /// Row `i` of a matrix as a vector.
    pub fn row(&mut self, x: NodeId, i: usize) -> Result<NodeId> {
        let s = self.shape(x);
        if s.len() != 2 || i >= s[0] {
            return Err(Error::contract(format!(
                "row {i} out of range for shape {s:?}"
            )));
        }
        let t = Tensor::vector(self.value(x).row(i).to_vec());
        Ok(self.push_op(t, Op::Row(x, i), &[x]))
    }

    /// Stacks equal-length vectors into the rows of a matrix.
    pub fn stack(&mut self, rows: &[NodeId]) -> Result<NodeId> {
        let first = *rows
            .first()
            .ok_or_else(|| Error::contract("stack of zero rows"))?;
        let k = self.shape(first).to_vec();
        if k.len() != 1 {
            return Err(self.dim_err("stack", first, first));
        }
        let mut data = Vec::with_capacity(rows.len() * k[0]);
        for &r in rows {
            if self.shape(r) != k.as_slice() {
                return Err(self.dim_err("stack", first, r));
            }
            data.extend_from_slice(self.value(r).data());
        }
        let t = Tensor::new(vec![rows.len(), k[0]], data)?;
        Ok(self.push_op(t, Op::Stack(rows.to_vec()), rows))
    }

    /// Selects rows of a table by index (embedding lookup).
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(self.dim_err("gather", table, table));
        }
        let (v, d) = (s[0], s[1]);
        let td = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= v {
                return Err(Error::contract(format!("gather index {i} >= {v}")));
            }
            data.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        let t = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.push_op(t, Op::Gather(table, ids.to_vec()), &[table]))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).data().iter().sum();
        self.push_op(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Sum of same-shape tensors, accumulated left to right.
    pub fn add_n(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::contract("add_n of zero terms"))?;
        let shape = self.shape(first).to_vec();
        let mut acc = vec![0.0; self.value(first).len()];
        for &x in xs {
            if self.shape(x) != shape.as_slice() {
                return Err(self.dim_err("add_n", first, x));
            }
            acc.iter_mut()
                .zip(self.value(x).data())
                .for_each(|(a, b)| *a += b);
        }
        let t = Tensor::new(shape, acc)?;
        Ok(self.push_op(t, Op::AddN(xs.to_vec()), xs))
    }

    /// `-log softmax(logits)[gold]` for a logit vector, computed in log space.
    pub fn cross_entropy(&mut self, logits: NodeId, gold: usize) -> Result<NodeId> {
        let s = self.shape(logits);
        if s.len() != 1 {
            return Err(self.dim_err("cross_entropy", logits, logits));
        }
        if gold >= s[0] {
            return Err(Error::contract(format!(
                "gold class {gold} out of range for {} logits",
                s[0]
            )));
        }
        let x = self.value(logits).data();
        let lse = log_sum_exp(x);
        let loss = lse - x[gold];
        let probs = x.iter().map(|&v| (v - lse).exp()).collect();
        Ok(self.push_op(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                gold,
                probs,
            },
            &[logits],
        ))
    }

    /// Back-propagates from a scalar node, adding into the gradient slots of
    /// every reachable leaf. Calling it again accumulates further.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                self.leaf_grads
                    .entry(idx)
                    .and_modify(|acc| acc.iter_mut().zip(&gout).for_each(|(a, b)| *a += b))
                    .or_insert_with(|| gout.clone());
                continue;
            }
            self.propagate(idx, &gout, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let wants = |id: NodeId| self.nodes[id.0].requires_grad;
        let val = |id: NodeId| self.nodes[id.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if wants(*a) {
                    // dA = dC · Bᵀ
                    let bd = val(*b);
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..k {
                            da[i * k + j] = (0..n).map(|c| gout[i * n + c] * bd[j * n + c]).sum();
                        }
                    }
                    accumulate(grads, *a, &da);
                }
                if wants(*b) {
                    // dB = Aᵀ · dC
                    let ad = val(*a);
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for j in 0..k {
                            let aij = ad[i * k + j];
                            for c in 0..n {
                                db[j * n + c] += aij * gout[i * n + c];
                            }
                        }
                    }
                    accumulate(grads, *b, &db);
                }
            }
            Op::MatVec(w, v) => {
                let k = self.shape(*v)[0];
                if wants(*w) {
                    let vd = val(*v);
                    let mut dw = Vec::with_capacity(gout.len() * k);
                    for &g in gout {
                        dw.extend(vd.iter().map(|&x| g * x));
                    }
                    accumulate(grads, *w, &dw);
                }
                if wants(*v) {
                    let wd = val(*w);
                    let mut dv = vec![0.0; k];
                    for (i, &g) in gout.iter().enumerate() {
                        for (d, &x) in dv.iter_mut().zip(&wd[i * k..(i + 1) * k]) {
                            *d += g * x;
                        }
                    }
                    accumulate(grads, *v, &dv);
                }
            }
            Op::VecMat(v, w) => {
                let n = self.shape(*w)[1];
                if wants(*w) {
                    let vd = val(*v);
                    let mut dw = Vec::with_capacity(vd.len() * n);
                    for &x in vd {
                        dw.extend(gout.iter().map(|&g| g * x));
                    }
                    accumulate(grads, *w, &dw);
                }
                if wants(*v) {
                    let wd = val(*w);
                    let dv: Vec<f64> = wd.chunks(n).map(|row| dot(row, gout)).collect();
                    accumulate(grads, *v, &dv);
                }
            }
            Op::Binary(op, a, b) => match op {
                Binary::Add => {
                    if wants(*a) {
                        accumulate(grads, *a, gout);
                    }
                    if wants(*b) {
                        accumulate(grads, *b, gout);
                    }
                }
                Binary::Sub => {
                    if wants(*a) {
                        accumulate(grads, *a, gout);
                    }
                    if wants(*b) {
                        let neg: Vec<f64> = gout.iter().map(|g| -g).collect();
                        accumulate(grads, *b, &neg);
                    }
                }
                Binary::Mul => {
                    if wants(*a) {
                        let d: Vec<f64> = gout.iter().zip(val(*b)).map(|(g, y)| g * y).collect();
                        accumulate(grads, *a, &d);
                    }
                    if wants(*b) {
                        let d: Vec<f64> = gout.iter().zip(val(*a)).map(|(g, x)| g * x).collect();
                        accumulate(grads, *b, &d);
                    }
                }
            },
            Op::AddBias(x, bias) => {
                if wants(*x) {
                    accumulate(grads, *x, gout);
                }
                if wants(*bias) {
                    let n = self.shape(*bias)[0];
                    let mut db = vec![0.0; n];
                    for chunk in gout.chunks(n) {
                        db.iter_mut().zip(chunk).for_each(|(d, g)| *d += g);
                    }
                    accumulate(grads, *bias, &db);
                }
            }
            Op::Scale(x, c) => {
                let d: Vec<f64> = gout.iter().map(|g| g * c).collect();
                accumulate(grads, *x, &d);
            }
            Op::Unary(op, x) => {
                let y = node.value.data();
                let xin = val(*x);
                let d: Vec<f64> = gout
                    .iter()
                    .zip(y)
                    .zip(xin)
                    .map(|((g, &yv), &xv)| match op {
                        Unary::Tanh => g * (1.0 - yv * yv),
                        Unary::Sigmoid => g * yv * (1.0 - yv),
                        Unary::Relu => {
                            if xv > 0.0 {
                                *g
                            } else {
                                0.0
                            }
                        }
                    })
                    .collect();
                accumulate(grads, *x, &d);
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let n = node.value.last_dim();
                let mut d = vec![0.0; y.len()];
                for ((ds, ys), gs) in d.chunks_mut(n).zip(y.chunks(n)).zip(gout.chunks(n)) {
                    let inner = dot(ys, gs);
                    for ((dv, &yv), &gv) in ds.iter_mut().zip(ys).zip(gs) {
                        *dv = yv * (gv - inner);
                    }
                }
                accumulate(grads, *x, &d);
            }
            Op::Concat(a, b) => {
                let na = self.nodes[a.0].value.last_dim();
                let nb = self.nodes[b.0].value.last_dim();
                let mut da = Vec::with_capacity(self.nodes[a.0].value.len());
                let mut db = Vec::with_capacity(self.nodes[b.0].value.len());
                if na + nb > 0 {
                    for chunk in gout.chunks(na + nb) {
                        da.extend_from_slice(&chunk[..na]);
                        db.extend_from_slice(&chunk[na..]);
                    }
                }
                if wants(*a) {
                    accumulate(grads, *a, &da);
                }
                if wants(*b) {
                    accumulate(grads, *b, &db);
                }
            }
            Op::Row(x, i) => {
                let s = self.shape(*x);
                let c = s[1];
                let mut d = vec![0.0; s[0] * c];
                d[i * c..(i + 1) * c].copy_from_slice(gout);
                accumulate(grads, *x, &d);
            }
            Op::Stack(rows) => {
                let k = self.shape(rows[0])[0];
                for (r, chunk) in rows.iter().zip(gout.chunks(k)) {
                    if wants(*r) {
                        accumulate(grads, *r, chunk);
                    }
                }
            }
            Op::Gather(table, ids) => {
                let s = self.shape(*table);
                let d = s[1];
                let mut dt = vec![0.0; s[0] * d];
                for (&i, chunk) in ids.iter().zip(gout.chunks(d)) {
                    dt[i * d..(i + 1) * d]
                        .iter_mut()
                        .zip(chunk)
                        .for_each(|(a, b)| *a += b);
                }
                accumulate(grads, *table, &dt);
            }
            Op::Sum(x) => {
                let d = vec![gout[0]; self.nodes[x.0].value.len()];
                accumulate(grads, *x, &d);
            }
            Op::AddN(xs) => {
                for x in xs {
                    if wants(*x) {
                        accumulate(grads, *x, gout);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                gold,
                probs,
            } => {
                let g = gout[0];
                let d: Vec<f64> = probs
                    .iter()
                    .enumerate()
                    .map(|(i, &p)| g * (p - if i == *gold { 1.0 } else { 0.0 }))
                    .collect();
                accumulate(grads, *logits, &d);
            }
        }
    }

    /// Gradient accumulated at a leaf by previous [`Graph::backward`] calls.
    pub fn grad(&self, leaf: NodeId) -> Option<&[f64]> {
        self.leaf_grads.get(&leaf.0).map(Vec::as_slice)
    }

    /// Gradient for a tensor previously bound with [`Graph::param`].
    pub fn param_grad(&self, t: &Tensor) -> Option<&[f64]> {
        self.bound
            .get(&(t as *const Tensor))
            .and_then(|id| self.grad(*id))
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.clear();
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: NodeId, g: &[f64]) {
    match &mut grads[id.0] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        slot => *slot = Some(g.to_vec()),
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..k {
            let aij = a[i * k + j];
            for c in 0..n {
                out[i * n + c] += aij * b[j * n + c];
            }
        }
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + x.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

pub fn softmax_in_place(slice: &mut [f64]) {
    let max = slice.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in slice.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in slice.iter_mut() {
        *v /= total;
    }
}

/// Values of `softmax` on a plain slice.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let mut out = x.to_vec();
    softmax_in_place(&mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx_eq::assert_close;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    mod approx_eq {
        macro_rules! assert_close {
            ($a:expr, $b:expr, $tol:expr) => {{
                let (a, b): (f64, f64) = ($a, $b);
                assert!((a - b).abs() <= $tol, "{a} vs {b} (tol {})", $tol);
            }};
        }
        pub(crate) use assert_close;
    }

    fn mat(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::new();
        let eye = g.constant(mat(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let m = g.constant(mat(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let p = g.matmul(eye, m).unwrap();
        assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

        let r = g.constant(mat(&[&[1.0, 2.0]]));
        let z = g.constant(mat(&[&[0.0], &[0.0]]));
        let p = g.matmul(r, z).unwrap();
        assert_eq!(g.value(p).data(), &[0.0]);

        let c = g.constant(mat(&[&[5.0], &[6.0]]));
        let p = g.matmul(m, c).unwrap();
        assert_eq!(g.value(p).shape(), &[2, 1]);
        assert_eq!(g.value(p).data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        match err {
            Error::Dimension { left, right, .. } => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![-1.5, 0.0, 1.0]));
        let r = g.relu(x);
        let s = g.sigmoid(x);
        let t = g.tanh(x);
        assert_eq!(g.value(r).data()[0], 0.0);
        assert_eq!(g.value(s).data()[1], 0.5);
        assert_close!(g.value(t).data()[2], 0.761_594_155_955_764_9, 1e-15);

        let y = g.constant(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.add(x, y), Err(Error::Dimension { .. })));
    }

    #[test]
    fn bias_add_broadcasts_last_axis_only() {
        let mut g = Graph::new();
        let x = g.constant(mat(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = g.constant(Tensor::vector(vec![10.0, 20.0]));
        let y = g.add_bias(x, b).unwrap();
        assert_eq!(g.value(y).data(), &[11.0, 22.0, 13.0, 24.0]);
        let bad = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        assert!(g.add_bias(x, bad).is_err());
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let u = g.constant(Tensor::vector(vec![0.0; 3]));
        let s = g.softmax(u).unwrap();
        for &p in g.value(s).data() {
            assert_close!(p, 1.0 / 3.0, 1e-15);
        }

        let big = g.constant(Tensor::vector(vec![1000.0, 0.0]));
        let s = g.softmax(big).unwrap();
        let d = g.value(s).data();
        assert!(d.iter().all(|v| v.is_finite()));
        assert_close!(d[0], 1.0, 1e-12);
        assert_close!(d[1], 0.0, 1e-12);

        let x = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let s = g.softmax(x).unwrap();
        let d = g.value(s).data();
        // e^x / (e + e^2 + e^3)
        let z = 1f64.exp() + 2f64.exp() + 3f64.exp();
        assert_close!(d[0], 1f64.exp() / z, 1e-15);
        assert_close!(d[0], 0.09003, 1e-5);
        assert_close!(d[1], 0.24473, 1e-5);
        assert_close!(d[2], 0.66524, 1e-5);
    }

    #[test]
    fn concat_examples() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = g.constant(Tensor::vector(vec![3.0]));
        let c = g.concat(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0]);

        let x = g.constant(mat(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let empty = g.constant(Tensor::zeros(&[2, 0]));
        let c = g.concat(x, empty).unwrap();
        assert_eq!(g.value(c), g.value(x));

        let glove = g.constant(Tensor::zeros(&[5, 100]));
        let elmo = g.constant(Tensor::zeros(&[5, 1024]));
        let c = g.concat(glove, elmo).unwrap();
        assert_eq!(g.value(c).shape(), &[5, 1124]);

        let wrong = g.constant(Tensor::zeros(&[4, 3]));
        assert!(g.concat(glove, wrong).is_err());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn matmul_backward_rule() {
        // loss = sum(A·B); dA = 1·Bᵀ, dB = Aᵀ·1
        let mut g = Graph::new();
        let a = g.variable(mat(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = g.variable(mat(&[&[5.0], &[6.0]]));
        let c = g.matmul(a, b).unwrap();
        let l = g.sum(c);
        g.backward(l).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[5.0, 6.0, 5.0, 6.0]);
        assert_eq!(g.grad(b).unwrap(), &[4.0, 6.0]);
    }

    #[test]
    fn shared_node_accumulates_path_gradients() {
        // f = sum(tanh(x) * x) using x twice vs two distinct copies summed.
        let x0 = vec![0.3, -1.2, 0.7];
        let mut g = Graph::new();
        let x = g.variable(Tensor::vector(x0.clone()));
        let t = g.tanh(x);
        let m = g.mul(t, x).unwrap();
        let l = g.sum(m);
        g.backward(l).unwrap();
        let shared = g.grad(x).unwrap().to_vec();

        let mut g2 = Graph::new();
        let x1 = g2.variable(Tensor::vector(x0.clone()));
        let x2 = g2.variable(Tensor::vector(x0));
        let t = g2.tanh(x1);
        let m = g2.mul(t, x2).unwrap();
        let l = g2.sum(m);
        g2.backward(l).unwrap();
        for i in 0..3 {
            assert_eq!(shared[i], g2.grad(x1).unwrap()[i] + g2.grad(x2).unwrap()[i]);
        }
    }

    #[test]
    fn param_binding_is_deduplicated() {
        let w = Tensor::vector(vec![2.0]);
        let mut g = Graph::new();
        let a = g.param(&w);
        let b = g.param(&w);
        assert_eq!(a, b);
        let s = g.add(a, b).unwrap();
        let l = g.sum(s);
        g.backward(l).unwrap();
        assert_eq!(g.param_grad(&w).unwrap(), &[2.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::vector(vec![1.0, 2.0]));
        let y = g.scale(x, 3.0);
        let l = g.sum(y);
        g.backward(l).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0, 6.0]);
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::vector(vec![1.0]));
        let x = g.variable(Tensor::vector(vec![2.0]));
        let m = g.mul(c, x).unwrap();
        let l = g.sum(m);
        g.backward(l).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(x).unwrap(), &[1.0]);
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::new();
        let u = g.constant(Tensor::vector(vec![0.5; 3]));
        let l = g.cross_entropy(u, 1).unwrap();
        assert_close!(g.value(l).item(), 3f64.ln(), 1e-15);

        let x = g.constant(Tensor::vector(vec![1.0, 2.0]));
        let l = g.cross_entropy(x, 0).unwrap();
        // ln(1 + e) is the hand value of -log(e^1 / (e^1 + e^2)).
        assert_close!(g.value(l).item(), (1.0 + 1f64.exp()).ln(), 1e-15);
        assert_close!(g.value(l).item(), 1.3133, 1e-4);

        let strong = g.constant(Tensor::vector(vec![50.0, 0.0]));
        let l = g.cross_entropy(strong, 0).unwrap();
        assert!(g.value(l).item() < 1e-20);

        assert!(matches!(g.cross_entropy(x, 2), Err(Error::Contract(_))));
    }

    fn random_matrix(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
        Tensor::uniform(&[n, n], -2.0, 2.0, rng)
    }

    #[test]
    fn matmul_is_associative_on_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let mut g = Graph::new();
            let a = g.constant(random_matrix(&mut rng, 4));
            let b = g.constant(random_matrix(&mut rng, 4));
            let c = g.constant(random_matrix(&mut rng, 4));
            let ab = g.matmul(a, b).unwrap();
            let ab_c = g.matmul(ab, c).unwrap();
            let bc = g.matmul(b, c).unwrap();
            let a_bc = g.matmul(a, bc).unwrap();
            for (x, y) in g.value(ab_c).data().iter().zip(g.value(a_bc).data()) {
                assert_close!(*x, *y, 1e-9);
            }
        }
    }

    proptest! {
        #[test]
        fn softmax_slices_sum_to_one(
            rows in 1usize..5,
            vals in proptest::collection::vec(-50.0f64..50.0, 1..40),
        ) {
            let cols = vals.len().div_ceil(rows).max(1);
            let mut data = vals.clone();
            data.resize(rows * cols, 0.0);
            let mut g = Graph::new();
            let x = g.constant(Tensor::new(vec![rows, cols], data).unwrap());
            let s = g.softmax(x).unwrap();
            for slice in g.value(s).data().chunks(cols) {
                let total: f64 = slice.iter().sum();
                prop_assert!((total - 1.0).abs() < 1e-9);
                prop_assert!(slice.iter().all(|&p| p >= 0.0));
            }
        }

        #[test]
        fn cross_entropy_is_shift_invariant(
            logits in proptest::collection::vec(-5.0f64..5.0, 2..8),
            shift in -100.0f64..100.0,
            gold_seed in 0usize..100,
        ) {
            let gold = gold_seed % logits.len();
            let mut g = Graph::new();
            let a = g.constant(Tensor::vector(logits.clone()));
            let b = g.constant(Tensor::vector(logits.iter().map(|v| v + shift).collect()));
            let la = g.cross_entropy(a, gold).unwrap();
            let lb = g.cross_entropy(b, gold).unwrap();
            prop_assert!((g.value(la).item() - g.value(lb).item()).abs() < 1e-9);
        }
    }
}
