//! Static compute graph with shape inference, forward evaluation and
//! reverse-mode gradients.
//!
//! Nodes are appended by [`GraphBuilder`] and can only reference earlier
//! nodes, so insertion order is a topological order. Leaves are bound by
//! name at evaluation time through a [`Feed`].

use std::collections::{BTreeMap, HashMap};

use super::array::Tensor;
use super::kernels::{self, ConvDims, Real};
use crate::error::{Error, Result};

pub type NodeId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LeafKind {
    Param,
    Input,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf { name: String, kind: LeafKind },
    Const(Tensor),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f32),
    /// `x[N, C, ...] + b[C]` or `+ b[N, C]`, broadcast over trailing axes.
    AddChannelBias(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Silu(NodeId),
    Clamp(NodeId, f32, f32),
    GroupNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
        eps: f32,
    },
    SumSquares(NodeId),
    Concat(Vec<NodeId>),
    Upsample2x(NodeId),
    Downsample2x(NodeId),
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf { .. } | Op::Const(_) => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::AddChannelBias(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Scale(a, _) | Op::Silu(a) | Op::Clamp(a, _, _) | Op::SumSquares(a) => vec![*a],
            Op::Upsample2x(a) | Op::Downsample2x(a) => vec![*a],
            Op::Conv2d { x, w, b } => vec![*x, *w, *b],
            Op::GroupNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Concat(v) => v.clone(),
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
}

/// An immutable, acyclic graph of primitive operations.
#[derive(Clone, Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    leaves: BTreeMap<String, NodeId>,
}

/// Incrementally builds a [`Graph`], inferring shapes as it goes.
#[derive(Default)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
    leaves: BTreeMap<String, NodeId>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        self.nodes.push(Node { op, shape });
        self.nodes.len() - 1
    }

    fn next_id(&self) -> NodeId {
        self.nodes.len()
    }

    fn shape_err<T>(&self, msg: String) -> Result<T> {
        Err(Error::Shape {
            node: self.next_id(),
            msg,
        })
    }

    fn check(&self, id: NodeId) -> Result<&[usize]> {
        match self.nodes.get(id) {
            Some(n) => Ok(&n.shape),
            None => self.shape_err(format!("reference to unknown node {id}")),
        }
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    fn leaf(&mut self, name: &str, shape: &[usize], kind: LeafKind) -> Result<NodeId> {
        if let Some(&id) = self.leaves.get(name) {
            let node = &self.nodes[id];
            let same_kind = matches!(&node.op, Op::Leaf { kind: k, .. } if *k == kind);
            if node.shape != shape || !same_kind {
                return Err(Error::Shape {
                    node: id,
                    msg: format!("leaf '{name}' redeclared with shape {shape:?}"),
                });
            }
            return Ok(id);
        }
        if shape.iter().any(|&d| d == 0) {
            return self.shape_err(format!("leaf '{name}' has zero extent"));
        }
        let id = self.push(
            Op::Leaf {
                name: name.to_string(),
                kind,
            },
            shape.to_vec(),
        );
        self.leaves.insert(name.to_string(), id);
        Ok(id)
    }

    /// External input leaf. Declaring the same name twice returns the same node.
    pub fn input(&mut self, name: &str, shape: &[usize]) -> Result<NodeId> {
        self.leaf(name, shape, LeafKind::Input)
    }

    /// Trainable parameter leaf.
    pub fn param(&mut self, name: &str, shape: &[usize]) -> Result<NodeId> {
        self.leaf(name, shape, LeafKind::Param)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Const(value), shape)
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<Vec<usize>> {
        let sa = self.check(a)?.to_vec();
        let sb = self.check(b)?;
        if sa != sb {
            return self.shape_err(format!("{what}: {sa:?} vs {sb:?}"));
        }
        Ok(sa)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.same_shape(a, b, "add")?;
        Ok(self.push(Op::Add(a, b), s))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.same_shape(a, b, "sub")?;
        Ok(self.push(Op::Sub(a, b), s))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.same_shape(a, b, "mul")?;
        Ok(self.push(Op::Mul(a, b), s))
    }

    pub fn scale(&mut self, a: NodeId, k: f32) -> Result<NodeId> {
        let s = self.check(a)?.to_vec();
        Ok(self.push(Op::Scale(a, k), s))
    }

    pub fn add_channel_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let sx = self.check(x)?.to_vec();
        let sb = self.check(b)?.to_vec();
        if sx.len() < 2 {
            return self.shape_err(format!("channel bias needs rank >= 2, got {sx:?}"));
        }
        let ok = sb == [sx[1]] || sb == [sx[0], sx[1]];
        if !ok {
            return self.shape_err(format!("channel bias {sb:?} does not fit {sx:?}"));
        }
        Ok(self.push(Op::AddChannelBias(x, b), sx))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.check(a)?.to_vec();
        let sb = self.check(b)?.to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return self.shape_err(format!("matmul {sa:?} x {sb:?}"));
        }
        Ok(self.push(Op::MatMul(a, b), vec![sa[0], sb[1]]))
    }

    /// Same-padded stride-1 convolution, odd square kernel.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let sx = self.check(x)?.to_vec();
        let sw = self.check(w)?.to_vec();
        let sb = self.check(b)?.to_vec();
        if sx.len() != 4 || sw.len() != 4 {
            return self.shape_err(format!("conv2d expects rank 4, got {sx:?} and {sw:?}"));
        }
        if sw[1] != sx[1] {
            return self.shape_err(format!(
                "conv2d weight {sw:?} expects {} input channels, got {}",
                sw[1], sx[1]
            ));
        }
        if sw[2] != sw[3] || sw[2] % 2 == 0 {
            return self.shape_err(format!("conv2d kernel must be odd and square: {sw:?}"));
        }
        if sb != [sw[0]] {
            return self.shape_err(format!("conv2d bias {sb:?} for {} outputs", sw[0]));
        }
        Ok(self.push(Op::Conv2d { x, w, b }, vec![sx[0], sw[0], sx[2], sx[3]]))
    }

    pub fn silu(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.check(x)?.to_vec();
        Ok(self.push(Op::Silu(x), s))
    }

    pub fn clamp(&mut self, x: NodeId, lo: f32, hi: f32) -> Result<NodeId> {
        let s = self.check(x)?.to_vec();
        if lo > hi {
            return self.shape_err(format!("clamp bounds {lo} > {hi}"));
        }
        Ok(self.push(Op::Clamp(x, lo, hi), s))
    }

    pub fn group_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
        eps: f32,
    ) -> Result<NodeId> {
        let sx = self.check(x)?.to_vec();
        if sx.len() != 4 || groups == 0 || sx[1] % groups != 0 {
            return self.shape_err(format!("group norm of {sx:?} into {groups} groups"));
        }
        for p in [gamma, beta] {
            if self.check(p)? != [sx[1]] {
                return self.shape_err("group norm affine must be [C]".to_string());
            }
        }
        Ok(self.push(
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                eps,
            },
            sx,
        ))
    }

    /// Scalar sum of squared elements.
    pub fn sum_squares(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        Ok(self.push(Op::SumSquares(x), vec![]))
    }

    /// Concatenation along axis 1.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let Some(&first) = parts.first() else {
            return self.shape_err("concat of nothing".to_string());
        };
        let mut shape = self.check(first)?.to_vec();
        if shape.len() < 2 {
            return self.shape_err(format!("concat needs rank >= 2, got {shape:?}"));
        }
        for &p in &parts[1..] {
            let s = self.check(p)?;
            if s.len() != shape.len() || s[0] != shape[0] || s[2..] != shape[2..] {
                return self.shape_err(format!("concat {s:?} onto {shape:?}"));
            }
            shape[1] += s[1];
        }
        Ok(self.push(Op::Concat(parts.to_vec()), shape))
    }

    pub fn upsample2x(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.check(x)?.to_vec();
        if s.len() != 4 {
            return self.shape_err(format!("upsample expects rank 4, got {s:?}"));
        }
        Ok(self.push(Op::Upsample2x(x), vec![s[0], s[1], 2 * s[2], 2 * s[3]]))
    }

    pub fn downsample2x(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.check(x)?.to_vec();
        if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return self.shape_err(format!("downsample expects even rank-4 input, got {s:?}"));
        }
        Ok(self.push(Op::Downsample2x(x), vec![s[0], s[1], s[2] / 2, s[3] / 2]))
    }

    pub fn finish(self) -> Graph {
        Graph {
            nodes: self.nodes,
            leaves: self.leaves,
        }
    }
}

/// Name → tensor bindings for graph leaves.
#[derive(Default, Clone)]
pub struct Feed<'a> {
    map: HashMap<&'a str, &'a Tensor>,
}

impl<'a> Feed<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, name: &'a str, value: &'a Tensor) -> &mut Self {
        self.map.insert(name, value);
        self
    }

    pub fn bind_all<I>(&mut self, items: I) -> &mut Self
    where
        I: IntoIterator<Item = (&'a String, &'a Tensor)>,
    {
        for (k, v) in items {
            self.map.insert(k.as_str(), v);
        }
        self
    }

    pub fn get(&self, name: &str) -> Option<&'a Tensor> {
        self.map.get(name).copied()
    }
}

/// Values of every node after a forward pass.
#[derive(Clone, Debug)]
pub struct Activations {
    values: Vec<Tensor>,
}

impl Activations {
    pub fn get(&self, id: NodeId) -> &Tensor {
        &self.values[id]
    }

    pub fn take(mut self, id: NodeId) -> Tensor {
        std::mem::replace(&mut self.values[id], Tensor::scalar(0.0))
    }
}

impl Graph {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn leaf(&self, name: &str) -> Option<NodeId> {
        self.leaves.get(name).copied()
    }

    /// Leaf names with their kinds, in name order.
    pub fn leaves(&self) -> impl Iterator<Item = (&str, LeafKind, NodeId)> + '_ {
        self.leaves.iter().map(|(name, &id)| match &self.nodes[id].op {
            Op::Leaf { kind, .. } => (name.as_str(), *kind, id),
            _ => unreachable!("leaf map points at non-leaf"),
        })
    }

    /// Evaluates every node in f32.
    pub fn forward(&self, feed: &Feed<'_>) -> Result<Activations> {
        let raw = self.evaluate::<f32>(feed, self.nodes.len())?;
        let values = raw
            .into_iter()
            .zip(&self.nodes)
            .map(|(data, node)| Tensor::new(node.shape.clone(), data))
            .collect::<Result<Vec<_>>>()?;
        Ok(Activations { values })
    }

    /// Evaluates the graph up to `output` in f64 and returns that node's
    /// value. Used as the finite-difference oracle.
    pub fn forward_f64(&self, feed: &Feed<'_>, output: NodeId) -> Result<Vec<f64>> {
        if output >= self.nodes.len() {
            return Err(Error::usage(format!("unknown output node {output}")));
        }
        let mut raw = self.evaluate::<f64>(feed, output + 1)?;
        Ok(raw.swap_remove(output))
    }

    fn evaluate<T: Real>(&self, feed: &Feed<'_>, upto: usize) -> Result<Vec<Vec<T>>> {
        let mut values: Vec<Vec<T>> = Vec::with_capacity(upto);
        for (id, node) in self.nodes[..upto].iter().enumerate() {
            let value = self.eval_node(id, node, &values, feed)?;
            if !value.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite { node: id });
            }
            values.push(value);
        }
        Ok(values)
    }

    fn eval_node<T: Real>(
        &self,
        id: NodeId,
        node: &Node,
        values: &[Vec<T>],
        feed: &Feed<'_>,
    ) -> Result<Vec<T>> {
        let v = |i: NodeId| values[i].as_slice();
        let shape = |i: NodeId| self.nodes[i].shape.as_slice();
        let zip = |a: NodeId, b: NodeId, f: fn(T, T) -> T| -> Vec<T> {
            v(a).iter().zip(v(b)).map(|(&x, &y)| f(x, y)).collect()
        };
        let out = match &node.op {
            Op::Leaf { name, .. } => {
                let bound = feed.get(name).ok_or_else(|| Error::Shape {
                    node: id,
                    msg: format!("leaf '{name}' is not bound"),
                })?;
                if bound.shape() != node.shape.as_slice() {
                    return Err(Error::Shape {
                        node: id,
                        msg: format!(
                            "leaf '{name}' bound with {:?}, expected {:?}",
                            bound.shape(),
                            node.shape
                        ),
                    });
                }
                bound.data().iter().map(|&x| T::from_f64(x as f64)).collect()
            }
            Op::Const(c) => c.data().iter().map(|&x| T::from_f64(x as f64)).collect(),
            Op::Add(a, b) => zip(*a, *b, |x, y| x + y),
            Op::Sub(a, b) => zip(*a, *b, |x, y| x - y),
            Op::Mul(a, b) => zip(*a, *b, |x, y| x * y),
            Op::Scale(a, k) => {
                let k = T::from_f64(*k as f64);
                v(*a).iter().map(|&x| x * k).collect()
            }
            Op::AddChannelBias(x, b) => {
                let sx = &node.shape;
                let (n, c) = (sx[0], sx[1]);
                let inner: usize = sx[2..].iter().product();
                let per_sample = shape(*b).len() == 2;
                let bias = v(*b);
                let mut data = v(*x).to_vec();
                for s in 0..n {
                    for ch in 0..c {
                        let bv = if per_sample { bias[s * c + ch] } else { bias[ch] };
                        let base = (s * c + ch) * inner;
                        for e in &mut data[base..base + inner] {
                            *e += bv;
                        }
                    }
                }
                data
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (shape(*a), shape(*b));
                let mut data = vec![T::ZERO; sa[0] * sb[1]];
                T::gemm(sa[0], sa[1], sb[1], v(*a), false, v(*b), false, &mut data, false);
                data
            }
            Op::Conv2d { x, w, b } => {
                let d = conv_dims(shape(*x), shape(*w));
                kernels::conv2d_forward(v(*x), v(*w), v(*b), &d)
            }
            Op::Silu(a) => v(*a).iter().map(|&x| kernels::silu(x)).collect(),
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (T::from_f64(*lo as f64), T::from_f64(*hi as f64));
                v(*a)
                    .iter()
                    .map(|&x| if x < lo { lo } else if x > hi { hi } else { x })
                    .collect()
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                eps,
            } => {
                let s = &node.shape;
                kernels::group_norm_forward(
                    v(*x),
                    v(*gamma),
                    v(*beta),
                    s[0],
                    s[1],
                    s[2] * s[3],
                    *groups,
                    *eps,
                )
            }
            Op::SumSquares(a) => {
                let ss: f64 = v(*a).iter().map(|x| x.to_f64() * x.to_f64()).sum();
                vec![T::from_f64(ss)]
            }
            Op::Concat(parts) => {
                let n = node.shape[0];
                let mut data = Vec::with_capacity(node.shape.iter().product());
                for s in 0..n {
                    for &p in parts {
                        let per = v(p).len() / n;
                        data.extend_from_slice(&v(p)[s * per..(s + 1) * per]);
                    }
                }
                data
            }
            Op::Upsample2x(a) => {
                let s = shape(*a);
                kernels::upsample2x(v(*a), s[0] * s[1], s[2], s[3])
            }
            Op::Downsample2x(a) => {
                let s = shape(*a);
                kernels::downsample2x(v(*a), s[0] * s[1], s[2], s[3])
            }
        };
        Ok(out)
    }

    /// Reverse-mode gradients of the scalar node `output` with respect to
    /// each leaf in `wrt`, returned in the same order.
    pub fn backward(
        &self,
        acts: &Activations,
        output: NodeId,
        wrt: &[NodeId],
    ) -> Result<Vec<Tensor>> {
        if output >= self.nodes.len() {
            return Err(Error::usage(format!("unknown output node {output}")));
        }
        if !self.nodes[output].shape.is_empty() {
            return Err(Error::usage(format!(
                "backward needs a scalar output, node {output} has shape {:?}",
                self.nodes[output].shape
            )));
        }
        for &w in wrt {
            match self.nodes.get(w).map(|n| &n.op) {
                Some(Op::Leaf { .. }) => {}
                _ => return Err(Error::usage(format!("node {w} is not a leaf"))),
            }
        }
        // nodes whose value depends on at least one requested leaf
        let mut needs = vec![false; output + 1];
        for id in 0..=output {
            needs[id] = wrt.contains(&id) || self.nodes[id].op.inputs().iter().any(|&i| needs[i]);
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output + 1];
        grads[output] = Some(Tensor::scalar(1.0));
        for id in (0..=output).rev() {
            if !needs[id] {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if matches!(self.nodes[id].op, Op::Leaf { .. }) {
                grads[id] = Some(g);
                continue;
            }
            self.propagate(id, &g, acts, &needs, &mut grads)?;
        }
        Ok(wrt
            .iter()
            .map(|&w| {
                grads
                    .get_mut(w)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Tensor::zeros(&self.nodes[w].shape))
            })
            .collect())
    }

    /// Gradients keyed by leaf name.
    pub fn backward_named(
        &self,
        acts: &Activations,
        output: NodeId,
        names: &[&str],
    ) -> Result<BTreeMap<String, Tensor>> {
        let ids = names
            .iter()
            .map(|n| {
                self.leaf(n)
                    .ok_or_else(|| Error::usage(format!("unknown leaf '{n}'")))
            })
            .collect::<Result<Vec<_>>>()?;
        let grads = self.backward(acts, output, &ids)?;
        Ok(names.iter().map(|n| n.to_string()).zip(grads).collect())
    }

    fn propagate(
        &self,
        id: NodeId,
        g: &Tensor,
        acts: &Activations,
        needs: &[bool],
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let node = &self.nodes[id];
        let val = |i: NodeId| acts.values[i].data();
        let gd = g.data();
        let shape_of = |i: NodeId| self.nodes[i].shape.clone();
        // returns the gradient slot for `i`, zero-initialized on first use
        fn slot<'g>(grads: &'g mut [Option<Tensor>], i: NodeId, shape: &[usize]) -> &'g mut [f32] {
            grads[i]
                .get_or_insert_with(|| Tensor::zeros(shape))
                .data_mut()
        }
        match &node.op {
            Op::Leaf { .. } | Op::Const(_) => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if needs[*a] {
                    for (d, &x) in slot(grads, *a, &shape_of(*a)).iter_mut().zip(gd) {
                        *d += x;
                    }
                }
                if needs[*b] {
                    for (d, &x) in slot(grads, *b, &shape_of(*b)).iter_mut().zip(gd) {
                        *d += sign * x;
                    }
                }
            }
            Op::Mul(a, b) => {
                if needs[*a] {
                    let other = val(*b);
                    for ((d, &x), &o) in slot(grads, *a, &shape_of(*a)).iter_mut().zip(gd).zip(other) {
                        *d += x * o;
                    }
                }
                if needs[*b] {
                    let other = val(*a);
                    for ((d, &x), &o) in slot(grads, *b, &shape_of(*b)).iter_mut().zip(gd).zip(other) {
                        *d += x * o;
                    }
                }
            }
            Op::Scale(a, k) => {
                if needs[*a] {
                    for (d, &x) in slot(grads, *a, &shape_of(*a)).iter_mut().zip(gd) {
                        *d += k * x;
                    }
                }
            }
            Op::AddChannelBias(x, b) => {
                if needs[*x] {
                    for (d, &v) in slot(grads, *x, &shape_of(*x)).iter_mut().zip(gd) {
                        *d += v;
                    }
                }
                if needs[*b] {
                    let s = &node.shape;
                    let (n, c) = (s[0], s[1]);
                    let inner: usize = s[2..].iter().product();
                    let per_sample = self.nodes[*b].shape.len() == 2;
                    let gb = slot(grads, *b, &shape_of(*b));
                    for smp in 0..n {
                        for ch in 0..c {
                            let base = (smp * c + ch) * inner;
                            let total: f32 = gd[base..base + inner].iter().sum();
                            let idx = if per_sample { smp * c + ch } else { ch };
                            gb[idx] += total;
                        }
                    }
                }
            }
            Op::MatMul(a, b) => {
                let sa = shape_of(*a);
                let sb = shape_of(*b);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if needs[*a] {
                    let bv = acts.values[*b].data().to_vec();
                    let ga = slot(grads, *a, &sa);
                    super::gemm::gemm(m, n, k, gd, false, &bv, true, ga, true);
                }
                if needs[*b] {
                    let av = acts.values[*a].data().to_vec();
                    let gb = slot(grads, *b, &sb);
                    super::gemm::gemm(k, m, n, &av, true, gd, false, gb, true);
                }
            }
            Op::Conv2d { x, w, b } => {
                let d = conv_dims(&self.nodes[*x].shape, &self.nodes[*w].shape);
                let mut gx = needs[*x].then(|| Tensor::zeros(&self.nodes[*x].shape));
                let mut gw = needs[*w].then(|| Tensor::zeros(&self.nodes[*w].shape));
                let mut gb = needs[*b].then(|| Tensor::zeros(&self.nodes[*b].shape));
                kernels::conv2d_backward(
                    val(*x),
                    val(*w),
                    gd,
                    &d,
                    gx.as_mut().map(|t| t.data_mut()),
                    gw.as_mut().map(|t| t.data_mut()),
                    gb.as_mut().map(|t| t.data_mut()),
                );
                for (i, part) in [(*x, gx), (*w, gw), (*b, gb)] {
                    if let Some(p) = part {
                        accumulate(grads, i, p);
                    }
                }
            }
            Op::Silu(a) => {
                if needs[*a] {
                    let xs = val(*a);
                    for ((d, &x), &gv) in slot(grads, *a, &shape_of(*a)).iter_mut().zip(xs).zip(gd) {
                        *d += gv * kernels::silu_grad(x);
                    }
                }
            }
            Op::Clamp(a, lo, hi) => {
                if needs[*a] {
                    let xs = val(*a);
                    for ((d, &x), &gv) in slot(grads, *a, &shape_of(*a)).iter_mut().zip(xs).zip(gd) {
                        if x >= *lo && x <= *hi {
                            *d += gv;
                        }
                    }
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                eps,
            } => {
                let s = &node.shape;
                let mut gx = needs[*x].then(|| Tensor::zeros(&self.nodes[*x].shape));
                let mut gg = needs[*gamma].then(|| Tensor::zeros(&self.nodes[*gamma].shape));
                let mut gbt = needs[*beta].then(|| Tensor::zeros(&self.nodes[*beta].shape));
                kernels::group_norm_backward(
                    val(*x),
                    val(*gamma),
                    gd,
                    s[0],
                    s[1],
                    s[2] * s[3],
                    *groups,
                    *eps,
                    gx.as_mut().map(|t| t.data_mut()),
                    gg.as_mut().map(|t| t.data_mut()),
                    gbt.as_mut().map(|t| t.data_mut()),
                );
                for (i, part) in [(*x, gx), (*gamma, gg), (*beta, gbt)] {
                    if let Some(p) = part {
                        accumulate(grads, i, p);
                    }
                }
            }
            Op::SumSquares(a) => {
                if needs[*a] {
                    let k = 2.0 * gd[0];
                    let xs = val(*a);
                    for (d, &x) in slot(grads, *a, &shape_of(*a)).iter_mut().zip(xs) {
                        *d += k * x;
                    }
                }
            }
            Op::Concat(parts) => {
                let n = node.shape[0];
                let mut offset = 0;
                let total = gd.len() / n;
                for &p in parts {
                    let per = self.nodes[p].shape.iter().product::<usize>() / n;
                    if needs[p] {
                        let gp = slot(grads, p, &shape_of(p));
                        for s in 0..n {
                            let src = &gd[s * total + offset..s * total + offset + per];
                            for (d, &v) in gp[s * per..(s + 1) * per].iter_mut().zip(src) {
                                *d += v;
                            }
                        }
                    }
                    offset += per;
                }
            }
            Op::Upsample2x(a) => {
                if needs[*a] {
                    let s = shape_of(*a);
                    let ga = slot(grads, *a, &s);
                    kernels::upsample2x_backward(gd, s[0] * s[1], s[2], s[3], ga);
                }
            }
            Op::Downsample2x(a) => {
                if needs[*a] {
                    let s = shape_of(*a);
                    let ga = slot(grads, *a, &s);
                    kernels::downsample2x_backward(gd, s[0] * s[1], s[2], s[3], ga);
                }
            }
        }
        Ok(())
    }

    /// Central-difference gradient of scalar `output` w.r.t. every element
    /// of the named leaves. Cost is two forward passes per coordinate.
    pub fn finite_diff_grad(
        &self,
        feed: &Feed<'_>,
        output: NodeId,
        wrt: &[&str],
        h: f32,
    ) -> Result<BTreeMap<String, Tensor>> {
        let mut result = BTreeMap::new();
        for name in wrt {
            let base = feed
                .get(name)
                .ok_or_else(|| Error::usage(format!("leaf '{name}' not bound")))?;
            let coords: Vec<usize> = (0..base.len()).collect();
            let values = self.finite_diff_coords(feed, output, name, &coords, h)?;
            result.insert(name.to_string(), Tensor::new(base.shape().to_vec(), values)?);
        }
        Ok(result)
    }

    /// Central differences at selected flat coordinates of one leaf.
    pub fn finite_diff_coords(
        &self,
        feed: &Feed<'_>,
        output: NodeId,
        name: &str,
        coords: &[usize],
        h: f32,
    ) -> Result<Vec<f32>> {
        if h <= 0.0 {
            return Err(Error::usage("finite difference step must be positive"));
        }
        let base = feed
            .get(name)
            .ok_or_else(|| Error::usage(format!("leaf '{name}' not bound")))?;
        let mut probe = base.clone();
        let mut out = Vec::with_capacity(coords.len());
        for &c in coords {
            let orig = probe.data()[c];
            probe.data_mut()[c] = orig + h;
            let plus = self.eval_scalar(feed, name, &probe, output)?;
            probe.data_mut()[c] = orig - h;
            let minus = self.eval_scalar(feed, name, &probe, output)?;
            probe.data_mut()[c] = orig;
            // actual step after f32 rounding of the probe coordinate
            let step = (orig + h) as f64 - (orig - h) as f64;
            out.push(((plus - minus) / step) as f32);
        }
        Ok(out)
    }

    /// Central-difference directional derivative along `direction`.
    pub fn finite_diff_directional(
        &self,
        feed: &Feed<'_>,
        output: NodeId,
        name: &str,
        direction: &Tensor,
        h: f32,
    ) -> Result<f64> {
        let base = feed
            .get(name)
            .ok_or_else(|| Error::usage(format!("leaf '{name}' not bound")))?;
        let mut plus = base.clone();
        plus.axpy(h, direction)?;
        let mut minus = base.clone();
        minus.axpy(-h, direction)?;
        let fp = self.eval_scalar(feed, name, &plus, output)?;
        let fm = self.eval_scalar(feed, name, &minus, output)?;
        Ok((fp - fm) / (2.0 * h as f64))
    }

    fn eval_scalar(&self, feed: &Feed<'_>, name: &str, value: &Tensor, output: NodeId) -> Result<f64> {
        let mut map: HashMap<&str, &Tensor> = feed.map.clone();
        map.insert(name, value);
        let out = self.forward_f64(&Feed { map }, output)?;
        if out.len() != 1 {
            return Err(Error::usage(format!("node {output} is not a scalar")));
        }
        Ok(out[0])
    }
}

fn accumulate(grads: &mut [Option<Tensor>], i: NodeId, part: Tensor) {
    match grads[i].as_mut() {
        Some(existing) => {
            for (d, &v) in existing.data_mut().iter_mut().zip(part.data()) {
                *d += v;
            }
        }
        None => grads[i] = Some(part),
    }
}

fn conv_dims(sx: &[usize], sw: &[usize]) -> ConvDims {
    ConvDims {
        n: sx[0],
        c_in: sx[1],
        c_out: sw[0],
        h: sx[2],
        w: sx[3],
        k: sw[2],
    }
}
