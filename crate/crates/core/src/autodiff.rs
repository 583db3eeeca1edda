//! Reverse-mode differentiation over an append-only tape of vector primitives.
//!
//! Nodes are pushed in evaluation order, so the tape is topologically sorted
//! by construction and the backward sweep is a single reverse pass.

use crate::error::{ensure_len, Error, Result};
use crate::ops::{self, check_gather, Ops};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A primitive to append to the tape, together with its inputs.
#[derive(Debug, Clone)]
pub enum Primitive {
    /// Trainable leaf. Gradients are reported for these.
    Leaf(Vec<f64>),
    Constant(Vec<f64>),
    MatVec {
        w: NodeId,
        x: NodeId,
        rows: usize,
        cols: usize,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Affine {
        input: NodeId,
        scale: f64,
        offset: f64,
    },
    Sigmoid(NodeId),
    Tanh(NodeId),
    Square(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Gather {
        input: NodeId,
        indices: Vec<usize>,
    },
    Concat(Vec<NodeId>),
    SoftTdi {
        pred: NodeId,
        target: Vec<f64>,
        gamma: f64,
    },
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    MatVec { w: NodeId, x: NodeId, rows: usize, cols: usize },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Affine { input: NodeId, scale: f64 },
    Sigmoid(NodeId),
    Tanh(NodeId),
    Square(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Gather { input: NodeId, indices: Vec<usize> },
    Concat(Vec<NodeId>),
    SoftTdi { pred: NodeId, target: Vec<f64>, gamma: f64 },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    /// Offset of the value in the tape arena.
    start: usize,
    len: usize,
}

/// Nodes plus one contiguous arena holding every forward value.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    data: Vec<f64>,
}

/// Adjoint of every node, laid out like the tape arena.
#[derive(Debug, Clone)]
pub struct Adjoints {
    grads: Vec<f64>,
    spans: Vec<(usize, usize)>,
}

impl Adjoints {
    /// Gradient of the loss w.r.t. `id`; zeros when the loss does not depend on it.
    pub fn get(&self, id: NodeId) -> Vec<f64> {
        let (start, len) = self.spans[id.0];
        self.grads[start..start + len].to_vec()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// Drops every node but keeps the allocations for reuse.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.data.clear();
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn param(&mut self, value: Vec<f64>) -> NodeId {
        self.push_vec(Op::Leaf, &value)
    }

    pub fn node_value(&self, id: NodeId) -> &[f64] {
        self.val(id)
    }

    fn val(&self, id: NodeId) -> &[f64] {
        let n = &self.nodes[id.0];
        &self.data[n.start..n.start + n.len]
    }

    fn push_vec(&mut self, op: Op, value: &[f64]) -> NodeId {
        let start = self.data.len();
        self.data.extend_from_slice(value);
        self.nodes.push(Node {
            op,
            start,
            len: value.len(),
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Appends a node of `len` entries; `fill` sees the existing arena and the new slot.
    fn push_with(&mut self, op: Op, len: usize, fill: impl FnOnce(&[f64], &mut [f64])) -> NodeId {
        let start = self.data.len();
        self.data.resize(start + len, 0.0);
        let (before, out) = self.data.split_at_mut(start);
        fill(before, out);
        self.nodes.push(Node { op, start, len });
        NodeId(self.nodes.len() - 1)
    }

    fn span(&self, id: NodeId) -> Result<(usize, usize)> {
        self.nodes
            .get(id.0)
            .map(|n| (n.start, n.len))
            .ok_or_else(|| Error::Tape(format!("unknown node id {}", id.0)))
    }

    fn binary(
        &mut self,
        context: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let ((sa, la), (sb, lb)) = (self.span(a)?, self.span(b)?);
        ensure_len(context, la, lb)?;
        Ok(self.push_with(op, la, |d, out| {
            for ((o, &x), &y) in out.iter_mut().zip(&d[sa..sa + la]).zip(&d[sb..sb + lb]) {
                *o = f(x, y);
            }
        }))
    }

    fn unary(&mut self, a: NodeId, f: impl Fn(f64) -> f64, op: Op) -> Result<NodeId> {
        let (sa, la) = self.span(a)?;
        Ok(self.push_with(op, la, |d, out| {
            for (o, &x) in out.iter_mut().zip(&d[sa..sa + la]) {
                *o = f(x);
            }
        }))
    }

    /// Appends `primitive`, computing and caching its forward value.
    pub fn record(&mut self, primitive: Primitive) -> Result<NodeId> {
        match primitive {
            Primitive::Leaf(v) => Ok(self.push_vec(Op::Leaf, &v)),
            Primitive::Constant(v) => Ok(self.push_vec(Op::Constant, &v)),
            Primitive::MatVec { w, x, rows, cols } => {
                let ((sw, lw), (sx, lx)) = (self.span(w)?, self.span(x)?);
                ensure_len("matvec weights", rows * cols, lw)?;
                ensure_len("matvec input", cols, lx)?;
                Ok(self.push_with(Op::MatVec { w, x, rows, cols }, rows, |d, out| {
                    let (wv, xv) = (&d[sw..sw + lw], &d[sx..sx + lx]);
                    for (o, row) in out.iter_mut().zip(wv.chunks_exact(cols.max(1))) {
                        *o = row.iter().zip(xv).map(|(a, b)| a * b).sum();
                    }
                }))
            }
            Primitive::Add(a, b) => self.binary("add", a, b, |x, y| x + y, Op::Add(a, b)),
            Primitive::Sub(a, b) => self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b)),
            Primitive::Mul(a, b) => self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b)),
            Primitive::Affine {
                input,
                scale,
                offset,
            } => self.unary(input, |x| scale * x + offset, Op::Affine { input, scale }),
            Primitive::Sigmoid(a) => self.unary(a, ops::sigmoid, Op::Sigmoid(a)),
            Primitive::Tanh(a) => self.unary(a, f64::tanh, Op::Tanh(a)),
            Primitive::Square(a) => self.unary(a, |x| x * x, Op::Square(a)),
            Primitive::Sum(a) => {
                let (sa, la) = self.span(a)?;
                Ok(self.push_with(Op::Sum(a), 1, |d, out| out[0] = d[sa..sa + la].iter().sum()))
            }
            Primitive::Mean(a) => {
                let (sa, la) = self.span(a)?;
                if la == 0 {
                    return Err(Error::InsufficientData("mean of an empty vector".into()));
                }
                Ok(self.push_with(Op::Mean(a), 1, |d, out| {
                    out[0] = d[sa..sa + la].iter().sum::<f64>() / la as f64
                }))
            }
            Primitive::Gather { input, indices } => {
                let (sa, la) = self.span(input)?;
                check_gather(la, &indices)?;
                let n = indices.len();
                let value: Vec<f64> = indices.iter().map(|&i| self.data[sa + i]).collect();
                let id = self.push_with(Op::Gather { input, indices }, n, |_, out| out.copy_from_slice(&value));
                Ok(id)
            }
            Primitive::Concat(parts) => {
                let mut spans = Vec::with_capacity(parts.len());
                for &p in &parts {
                    spans.push(self.span(p)?);
                }
                let total = spans.iter().map(|s| s.1).sum();
                Ok(self.push_with(Op::Concat(parts), total, |d, out| {
                    let mut at = 0;
                    for (s, l) in spans {
                        out[at..at + l].copy_from_slice(&d[s..s + l]);
                        at += l;
                    }
                }))
            }
            Primitive::SoftTdi { pred, target, gamma } => {
                self.span(pred)?;
                let v = crate::metrics::soft_tdi(self.val(pred), &target, gamma)?;
                Ok(self.push_vec(Op::SoftTdi { pred, target, gamma }, &[v]))
            }
        }
    }

    /// Reverse sweep from the scalar node `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Adjoints> {
        let (loss_start, loss_len) = self.span(loss)?;
        if loss_len != 1 {
            return Err(Error::Tape(format!(
                "loss node {} has {} entries, expected a scalar",
                loss.0, loss_len
            )));
        }
        let spans: Vec<(usize, usize)> = self.nodes.iter().map(|n| (n.start, n.len)).collect();
        let mut grads: Vec<f64> = vec![0.0; self.data.len()];
        let mut reached = vec![false; self.nodes.len()];
        grads[loss_start] = 1.0;
        reached[loss.0] = true;

        for k in (0..=loss.0).rev() {
            if !reached[k] {
                continue;
            }
            let node = &self.nodes[k];
            let (before, rest) = grads.split_at_mut(node.start);
            let g = &rest[..node.len];
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NumericAdjoint { node: k });
            }
            match &node.op {
                Op::Leaf | Op::Constant => {}
                Op::MatVec { w, x, rows, cols } => {
                    let (rows, cols) = (*rows, *cols);
                    let wv = self.val(*w);
                    let xv = self.val(*x);
                    if self.tracks(*w) {
                        let gw = slot(before, &mut reached, &spans, *w);
                        for i in 0..rows {
                            let gi = g[i];
                            if gi != 0.0 {
                                let row = &mut gw[i * cols..(i + 1) * cols];
                                for (r, &xj) in row.iter_mut().zip(xv) {
                                    *r += gi * xj;
                                }
                            }
                        }
                    }
                    if self.tracks(*x) {
                        let gx = slot(before, &mut reached, &spans, *x);
                        for i in 0..rows {
                            let gi = g[i];
                            if gi != 0.0 {
                                let row = &wv[i * cols..(i + 1) * cols];
                                for (r, &wij) in gx.iter_mut().zip(row) {
                                    *r += gi * wij;
                                }
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    add_into(slot(before, &mut reached, &spans, *a), g, 1.0);
                    add_into(slot(before, &mut reached, &spans, *b), g, 1.0);
                }
                Op::Sub(a, b) => {
                    add_into(slot(before, &mut reached, &spans, *a), g, 1.0);
                    add_into(slot(before, &mut reached, &spans, *b), g, -1.0);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.val(*a), self.val(*b));
                    if self.tracks(*a) {
                        for ((r, &gi), &y) in slot(before, &mut reached, &spans, *a).iter_mut().zip(g).zip(vb) {
                            *r += gi * y;
                        }
                    }
                    if self.tracks(*b) {
                        for ((r, &gi), &x) in slot(before, &mut reached, &spans, *b).iter_mut().zip(g).zip(va) {
                            *r += gi * x;
                        }
                    }
                }
                Op::Affine { input, scale } => add_into(slot(before, &mut reached, &spans, *input), g, *scale),
                Op::Sigmoid(a) => {
                    let out = self.val(NodeId(k));
                    for ((r, &gi), &y) in slot(before, &mut reached, &spans, *a).iter_mut().zip(g).zip(out) {
                        *r += gi * y * (1.0 - y);
                    }
                }
                Op::Tanh(a) => {
                    let out = self.val(NodeId(k));
                    for ((r, &gi), &y) in slot(before, &mut reached, &spans, *a).iter_mut().zip(g).zip(out) {
                        *r += gi * (1.0 - y * y);
                    }
                }
                Op::Square(a) => {
                    let va = self.val(*a);
                    for ((r, &gi), &x) in slot(before, &mut reached, &spans, *a).iter_mut().zip(g).zip(va) {
                        *r += 2.0 * gi * x;
                    }
                }
                Op::Sum(a) => {
                    let g0 = g[0];
                    slot(before, &mut reached, &spans, *a).iter_mut().for_each(|r| *r += g0);
                }
                Op::Mean(a) => {
                    let g0 = g[0] / spans[a.0].1 as f64;
                    slot(before, &mut reached, &spans, *a).iter_mut().for_each(|r| *r += g0);
                }
                Op::Gather { input, indices } => {
                    let gi = slot(before, &mut reached, &spans, *input);
                    for (&i, &gk) in indices.iter().zip(g) {
                        gi[i] += gk;
                    }
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let n = spans[p.0].1;
                        add_into(slot(before, &mut reached, &spans, *p), &g[offset..offset + n], 1.0);
                        offset += n;
                    }
                }
                Op::SoftTdi { pred, target, gamma } => {
                    let (_, dpred) = crate::metrics::soft_tdi_with_grad(self.val(*pred), target, *gamma)?;
                    add_into(slot(before, &mut reached, &spans, *pred), &dpred, g[0]);
                }
            }
        }
        Ok(Adjoints { grads, spans })
    }

    /// Constants never need adjoints.
    fn tracks(&self, id: NodeId) -> bool {
        !matches!(self.nodes[id.0].op, Op::Constant)
    }
}

fn slot<'a>(before: &'a mut [f64], reached: &mut [bool], spans: &[(usize, usize)], id: NodeId) -> &'a mut [f64] {
    reached[id.0] = true;
    let (s, l) = spans[id.0];
    &mut before[s..s + l]
}

fn add_into(dst: &mut [f64], src: &[f64], factor: f64) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += factor * s;
    }
}

impl Ops for Tape {
    type V = NodeId;

    fn constant(&mut self, value: Vec<f64>) -> NodeId {
        self.push_vec(Op::Constant, &value)
    }

    fn value<'a>(&'a self, v: &'a NodeId) -> &'a [f64] {
        self.val(*v)
    }

    fn matvec(&mut self, w: &NodeId, x: &NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        self.record(Primitive::MatVec {
            w: *w,
            x: *x,
            rows,
            cols,
        })
    }

    fn add(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        self.record(Primitive::Add(*a, *b))
    }

    fn sub(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        self.record(Primitive::Sub(*a, *b))
    }

    fn mul(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        self.record(Primitive::Mul(*a, *b))
    }

    fn affine(&mut self, a: &NodeId, scale: f64, offset: f64) -> NodeId {
        self.unary(*a, |x| scale * x + offset, Op::Affine { input: *a, scale })
            .expect("node ids come from this tape")
    }

    fn sigmoid(&mut self, a: &NodeId) -> NodeId {
        self.unary(*a, ops::sigmoid, Op::Sigmoid(*a)).expect("node ids come from this tape")
    }

    fn tanh(&mut self, a: &NodeId) -> NodeId {
        self.unary(*a, f64::tanh, Op::Tanh(*a)).expect("node ids come from this tape")
    }

    fn square(&mut self, a: &NodeId) -> NodeId {
        self.unary(*a, |x| x * x, Op::Square(*a)).expect("node ids come from this tape")
    }

    fn sum(&mut self, a: &NodeId) -> NodeId {
        self.record(Primitive::Sum(*a)).expect("node ids come from this tape")
    }

    fn mean(&mut self, a: &NodeId) -> Result<NodeId> {
        self.record(Primitive::Mean(*a))
    }

    fn gather(&mut self, a: &NodeId, indices: &[usize]) -> Result<NodeId> {
        self.record(Primitive::Gather {
            input: *a,
            indices: indices.to_vec(),
        })
    }

    fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        self.record(Primitive::Concat(parts.to_vec())).expect("node ids come from this tape")
    }

    fn soft_tdi(&mut self, pred: &NodeId, target: &[f64], gamma: f64) -> Result<NodeId> {
        self.record(Primitive::SoftTdi {
            pred: *pred,
            target: target.to_vec(),
            gamma,
        })
    }
}
