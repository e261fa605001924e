//! Append-only operation tape with reverse-mode gradient replay.

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;

use super::kernels::{gemm, log_sum_exp, softmax_into};
use super::{check_shape, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryKind {
    Exp,
    Log,
    Sigmoid,
    LogSigmoid,
    Tanh,
    Neg,
    Abs,
    Square,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

/// How an operand position maps onto output positions.
#[derive(Debug, Clone, Copy)]
enum Bcast {
    Same,
    Scalar,
    /// Operand repeats along leading axes; length of the operand.
    Row(usize),
    /// Operand repeats along trailing axes; number of trailing elements per
    /// operand entry.
    Col(usize),
}

impl Bcast {
    #[inline]
    fn index(self, p: usize) -> usize {
        match self {
            Bcast::Same => p,
            Bcast::Scalar => 0,
            Bcast::Row(n) => p % n,
            Bcast::Col(inner) => p / inner,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum ReduceKind {
    Sum,
    Mean,
    Max,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Unary {
        x: usize,
        kind: UnaryKind,
    },
    Scale {
        x: usize,
        c: f64,
    },
    AddScalar {
        x: usize,
    },
    MaxScalar {
        x: usize,
        c: f64,
    },
    Powf {
        x: usize,
        p: f64,
    },
    Binary {
        a: usize,
        b: usize,
        kind: BinaryKind,
        map_a: Bcast,
        map_b: Bcast,
    },
    Maximum {
        a: usize,
        b: usize,
    },
    MatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        ta: bool,
        tb: bool,
        /// `b` is a single matrix shared across the batch.
        shared_b: bool,
    },
    Reshape {
        x: usize,
    },
    Permute {
        x: usize,
        /// Output flat index -> input flat index.
        map: Vec<usize>,
    },
    Narrow {
        x: usize,
        outer: usize,
        len_in: usize,
        start: usize,
        len: usize,
        inner: usize,
    },
    Concat {
        parts: Vec<(usize, usize)>,
        outer: usize,
        inner: usize,
    },
    Softmax {
        x: usize,
        n: usize,
        temp: f64,
    },
    LogSoftmax {
        x: usize,
        n: usize,
        temp: f64,
    },
    Reduce {
        x: usize,
        kind: ReduceKind,
        outer: usize,
        len: usize,
        inner: usize,
        argmax: Vec<usize>,
    },
    FrobNorm {
        x: usize,
    },
    RowNorms {
        x: usize,
        n: usize,
    },
    GatherRows {
        table: usize,
        ids: Vec<usize>,
        d: usize,
    },
    PickLast {
        x: usize,
        idx: Vec<usize>,
        n: usize,
    },
    CausalMask {
        x: usize,
        s: usize,
    },
    BlockDiag {
        x: usize,
        heads: usize,
        dh: usize,
        groups: usize,
    },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
    key: Option<u64>,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
    leaves: HashMap<u64, usize>,
    consumed: bool,
    fault: Option<(UnaryKind, f64)>,
}

/// Records a forward computation so it can be differentiated once.
#[derive(Default)]
pub struct Tape {
    inner: RefCell<TapeInner>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("Tape")
            .field("nodes", &inner.nodes.len())
            .field("consumed", &inner.consumed)
            .finish()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients of a scalar loss with respect to the leaves of a tape.
#[derive(Debug, Default)]
pub struct Gradients {
    by_key: HashMap<u64, Vec<f64>>,
    by_node: HashMap<usize, Vec<f64>>,
}

impl Gradients {
    /// Gradient for a tensor that was bound with [`Tape::leaf`].
    pub fn of(&self, tensor: &Tensor) -> Option<&[f64]> {
        self.by_key.get(&tensor.key()).map(Vec::as_slice)
    }

    /// Gradient for any leaf variable.
    pub fn of_var(&self, var: Var<'_>) -> Option<&[f64]> {
        self.by_node.get(&var.id).map(Vec::as_slice)
    }

    /// Adds each tensor's gradient (if any) into its `grad` slot.
    pub fn accumulate_into<'a>(&self, tensors: impl IntoIterator<Item = &'a mut Tensor>) -> Result<()> {
        for t in tensors {
            if let Some(g) = self.by_key.get(&t.key()) {
                t.accumulate_grad(g)?;
            }
        }
        Ok(())
    }
}

fn bcast_maps(sa: &[usize], sb: &[usize]) -> Option<(Vec<usize>, Bcast, Bcast)> {
    let na: usize = sa.iter().product();
    let nb: usize = sb.iter().product();
    if sa == sb {
        Some((sa.to_vec(), Bcast::Same, Bcast::Same))
    } else if nb == 1 {
        Some((sa.to_vec(), Bcast::Same, Bcast::Scalar))
    } else if na == 1 {
        Some((sb.to_vec(), Bcast::Scalar, Bcast::Same))
    } else {
        None
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

#[inline]
fn apply_binary(kind: BinaryKind, a: f64, b: f64) -> f64 {
    match kind {
        BinaryKind::Add => a + b,
        BinaryKind::Sub => a - b,
        BinaryKind::Mul => a * b,
        BinaryKind::Div => a / b,
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn permute_map(shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let numel: usize = shape.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    for _ in 0..numel {
        let src: usize = (0..rank).map(|d| idx[d] * in_strides[perm[d]]).sum();
        map.push(src);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out_shape, map)
}

/// Lazily allocated gradient slot of a parent node, or `None` when the
/// parent does not need a gradient.
fn slot<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node], p: usize) -> Option<&'g mut [f64]> {
    if !nodes[p].requires_grad {
        return None;
    }
    let len = nodes[p].value.len();
    Some(grads[p].get_or_insert_with(|| vec![0.0; len]).as_mut_slice())
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Scales the backward rule of one unary op. Only meant for negative
    /// controls of the gradient oracle.
    pub fn inject_fault(&self, kind: UnaryKind, factor: f64) {
        self.inner.borrow_mut().fault = Some((kind, factor));
    }

    fn push(&self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var<'_> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            key: None,
        });
        Var {
            tape: self,
            id: inner.nodes.len() - 1,
        }
    }

    /// Binds a tensor as a leaf. Binding the same tensor twice returns the
    /// same variable, so its gradient accumulates across uses.
    pub fn leaf(&self, tensor: &Tensor) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        if let Some(&id) = inner.leaves.get(&tensor.key()) {
            return Var { tape: self, id };
        }
        inner.nodes.push(Node {
            shape: tensor.shape().to_vec(),
            value: tensor.data().to_vec(),
            op: Op::Leaf,
            requires_grad: tensor.requires_grad(),
            key: Some(tensor.key()),
        });
        let id = inner.nodes.len() - 1;
        inner.leaves.insert(tensor.key(), id);
        Var { tape: self, id }
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, shape: &[usize], data: Vec<f64>) -> Result<Var<'_>> {
        let numel = check_shape(shape)?;
        if numel != data.len() {
            return Err(Error::shape(format!("constant {shape:?} with {} values", data.len())));
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf, false))
    }

    /// A leaf that receives a gradient but is not tied to a stored tensor.
    pub fn variable(&self, shape: &[usize], data: Vec<f64>) -> Result<Var<'_>> {
        let numel = check_shape(shape)?;
        if numel != data.len() {
            return Err(Error::shape(format!("variable {shape:?} with {} values", data.len())));
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf, true))
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.push(Vec::new(), vec![v], Op::Leaf, false)
    }

    fn with_node<R>(&self, id: usize, f: impl FnOnce(&Node) -> R) -> R {
        f(&self.inner.borrow().nodes[id])
    }

    /// Replays the tape in reverse and returns leaf gradients of `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(Error::TapeConsumed);
        }
        if inner.nodes.is_empty() {
            return Err(Error::invalid("backward on an empty tape"));
        }
        if inner.nodes[loss.id].value.len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                inner.nodes[loss.id].shape
            )));
        }
        inner.consumed = true;
        let fault = inner.fault;
        let nodes = &inner.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for i in (0..=loss.id).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            backward_node(node, i, &g, nodes, &mut grads, fault);
            if let Op::Leaf = node.op {
                if let Some(key) = node.key {
                    out.by_key.insert(key, g.clone());
                }
                out.by_node.insert(i, g);
            }
        }
        Ok(out)
    }
}

fn backward_node(
    node: &Node,
    _id: usize,
    g: &[f64],
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    fault: Option<(UnaryKind, f64)>,
) {
    let y = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Unary { x, kind } => {
            let xv = &nodes[*x].value;
            let factor = match fault {
                Some((k, f)) if k == *kind => f,
                _ => 1.0,
            };
            if let Some(dx) = slot(grads, nodes, *x) {
                for p in 0..g.len() {
                    let local = match kind {
                        UnaryKind::Exp => y[p],
                        UnaryKind::Log => 1.0 / xv[p],
                        UnaryKind::Sigmoid => y[p] * (1.0 - y[p]),
                        UnaryKind::LogSigmoid => sigmoid(-xv[p]),
                        UnaryKind::Tanh => 1.0 - y[p] * y[p],
                        UnaryKind::Neg => -1.0,
                        UnaryKind::Abs => {
                            if xv[p] > 0.0 {
                                1.0
                            } else if xv[p] < 0.0 {
                                -1.0
                            } else {
                                0.0
                            }
                        }
                        UnaryKind::Square => 2.0 * xv[p],
                    };
                    dx[p] += g[p] * local * factor;
                }
            }
        }
        Op::Scale { x, c } => {
            if let Some(dx) = slot(grads, nodes, *x) {
                dx.iter_mut().zip(g).for_each(|(d, gi)| *d += gi * c);
            }
        }
        Op::AddScalar { x } | Op::Reshape { x } => {
            if let Some(dx) = slot(grads, nodes, *x) {
                dx.iter_mut().zip(g).for_each(|(d, gi)| *d += gi);
            }
        }
        Op::MaxScalar { x, c } => {
            let xv = &nodes[*x].value;
            if let Some(dx) = slot(grads, nodes, *x) {
                for p in 0..g.len() {
                    if xv[p] > *c {
                        dx[p] += g[p];
                    }
                }
            }
        }
        Op::Powf { x, p: e } => {
            let xv = &nodes[*x].value;
            if let Some(dx) = slot(grads, nodes, *x) {
                for p in 0..g.len() {
                    dx[p] += g[p] * e * xv[p].powf(e - 1.0);
                }
            }
        }
        Op::Binary {
            a,
            b,
            kind,
            map_a,
            map_b,
        } => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            if let Some(da) = slot(grads, nodes, *a) {
                for p in 0..g.len() {
                    let (ia, ib) = (map_a.index(p), map_b.index(p));
                    let local = match kind {
                        BinaryKind::Add | BinaryKind::Sub => 1.0,
                        BinaryKind::Mul => bv[ib],
                        BinaryKind::Div => 1.0 / bv[ib],
                    };
                    da[ia] += g[p] * local;
                }
            }
            if let Some(db) = slot(grads, nodes, *b) {
                for p in 0..g.len() {
                    let (ia, ib) = (map_a.index(p), map_b.index(p));
                    let local = match kind {
                        BinaryKind::Add => 1.0,
                        BinaryKind::Sub => -1.0,
                        BinaryKind::Mul => av[ia],
                        BinaryKind::Div => -av[ia] / (bv[ib] * bv[ib]),
                    };
                    db[ib] += g[p] * local;
                }
            }
        }
        Op::Maximum { a, b } => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            if let Some(da) = slot(grads, nodes, *a) {
                for p in 0..g.len() {
                    if av[p] >= bv[p] {
                        da[p] += g[p];
                    }
                }
            }
            if let Some(db) = slot(grads, nodes, *b) {
                for p in 0..g.len() {
                    if av[p] < bv[p] {
                        db[p] += g[p];
                    }
                }
            }
        }
        Op::MatMul {
            a,
            b,
            batch,
            m,
            k,
            n,
            ta,
            tb,
            shared_b,
        } => {
            let (m, k, n, ta, tb) = (*m, *k, *n, *ta, *tb);
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            let b_stride = if *shared_b { 0 } else { k * n };
            if let Some(da) = slot(grads, nodes, *a) {
                for i in 0..*batch {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    let bi = &bv[i * b_stride..i * b_stride + k * n];
                    let dai = &mut da[i * m * k..(i + 1) * m * k];
                    match (ta, tb) {
                        (false, false) => gemm(m, n, k, gi, false, bi, true, dai, true),
                        (false, true) => gemm(m, n, k, gi, false, bi, false, dai, true),
                        (true, false) => gemm(k, n, m, bi, false, gi, true, dai, true),
                        (true, true) => gemm(k, n, m, bi, true, gi, true, dai, true),
                    }
                }
            }
            if let Some(db) = slot(grads, nodes, *b) {
                for i in 0..*batch {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    let ai = &av[i * m * k..(i + 1) * m * k];
                    let dbi = &mut db[i * b_stride..i * b_stride + k * n];
                    match (ta, tb) {
                        (false, false) => gemm(k, m, n, ai, true, gi, false, dbi, true),
                        (true, false) => gemm(k, m, n, ai, false, gi, false, dbi, true),
                        (false, true) => gemm(n, m, k, gi, true, ai, false, dbi, true),
                        (true, true) => gemm(n, m, k, gi, true, ai, true, dbi, true),
                    }
                }
            }
        }
        Op::Permute { x, map } => {
            if let Some(dx) = slot(grads, nodes, *x) {
                for (p, &src) in map.iter().enumerate() {
                    dx[src] += g[p];
                }
            }
        }
        Op::Narrow {
            x,
            outer,
            len_in,
            start,
            len,
            inner,
        } => {
            if let Some(dx) = slot(grads, nodes, *x) {
                let chunk = len * inner;
                for o in 0..*outer {
                    let src = o * len_in * inner + start * inner;
                    dx[src..src + chunk]
                        .iter_mut()
                        .zip(&g[o * chunk..(o + 1) * chunk])
                        .for_each(|(d, gi)| *d += gi);
                }
            }
        }
        Op::Concat { parts, outer, inner } => {
            let total: usize = parts.iter().map(|(_, l)| l).sum();
            let mut offset = 0;
            for &(pid, len) in parts {
                if let Some(dp) = slot(grads, nodes, pid) {
                    let chunk = len * inner;
                    for o in 0..*outer {
                        let src = o * total * inner + offset * inner;
                        dp[o * chunk..(o + 1) * chunk]
                            .iter_mut()
                            .zip(&g[src..src + chunk])
                            .for_each(|(d, gi)| *d += gi);
                    }
                }
                offset += len;
            }
        }
        Op::Softmax { x, n, temp } => {
            if let Some(dx) = slot(grads, nodes, *x) {
                for ((yr, gr), dr) in y.chunks(*n).zip(g.chunks(*n)).zip(dx.chunks_mut(*n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..*n {
                        dr[j] += yr[j] * (gr[j] - dot) / temp;
                    }
                }
            }
        }
        Op::LogSoftmax { x, n, temp } => {
            if let Some(dx) = slot(grads, nodes, *x) {
                for ((yr, gr), dr) in y.chunks(*n).zip(g.chunks(*n)).zip(dx.chunks_mut(*n)) {
                    let gsum: f64 = gr.iter().sum();
                    for j in 0..*n {
                        dr[j] += (gr[j] - yr[j].exp() * gsum) / temp;
                    }
                }
            }
        }
        Op::Reduce {
            x,
            kind,
            outer,
            len,
            inner,
            argmax,
        } => {
            if let Some(dx) = slot(grads, nodes, *x) {
                for o in 0..*outer {
                    for i in 0..*inner {
                        let gi = g[o * inner + i];
                        match kind {
                            ReduceKind::Sum | ReduceKind::Mean => {
                                let s = if let ReduceKind::Mean = kind {
                                    gi / *len as f64
                                } else {
                                    gi
                                };
                                for l in 0..*len {
                                    dx[(o * len + l) * inner + i] += s;
                                }
                            }
                            ReduceKind::Max => {
                                let l = argmax[o * inner + i];
                                dx[(o * len + l) * inner + i] += gi;
                            }
                        }
                    }
                }
            }
        }
        Op::FrobNorm { x } => {
            let xv = &nodes[*x].value;
            let norm = y[0];
            if let Some(dx) = slot(grads, nodes, *x) {
                if norm > 0.0 {
                    dx.iter_mut().zip(xv).for_each(|(d, v)| *d += g[0] * v / norm);
                }
            }
        }
        Op::RowNorms { x, n } => {
            let xv = &nodes[*x].value;
            if let Some(dx) = slot(grads, nodes, *x) {
                for (r, (xr, dr)) in xv.chunks(*n).zip(dx.chunks_mut(*n)).enumerate() {
                    if y[r] > 0.0 {
                        let s = g[r] / y[r];
                        dr.iter_mut().zip(xr).for_each(|(d, v)| *d += s * v);
                    }
                }
            }
        }
        Op::GatherRows { table, ids, d } => {
            if let Some(dt) = slot(grads, nodes, *table) {
                for (r, &id) in ids.iter().enumerate() {
                    dt[id * d..(id + 1) * d]
                        .iter_mut()
                        .zip(&g[r * d..(r + 1) * d])
                        .for_each(|(a, b)| *a += b);
                }
            }
        }
        Op::PickLast { x, idx, n } => {
            if let Some(dx) = slot(grads, nodes, *x) {
                for (r, &j) in idx.iter().enumerate() {
                    dx[r * n + j] += g[r];
                }
            }
        }
        Op::CausalMask { x, s } => {
            if let Some(dx) = slot(grads, nodes, *x) {
                let s = *s;
                for (mat_g, mat_d) in g.chunks(s * s).zip(dx.chunks_mut(s * s)) {
                    for i in 0..s {
                        for j in 0..=i {
                            mat_d[i * s + j] += mat_g[i * s + j];
                        }
                    }
                }
            }
        }
        Op::BlockDiag { x, heads, dh, groups } => {
            if let Some(dx) = slot(grads, nodes, *x) {
                for_block_diag(*heads, *dh, *groups, |src, dst| dx[src] += g[dst]);
            }
        }
    }
}

fn for_block_diag(heads: usize, dh: usize, groups: usize, mut f: impl FnMut(usize, usize)) {
    let d = heads * dh;
    let cols = groups * d;
    for h in 0..heads {
        for a in 0..dh {
            for gr in 0..groups {
                for b in 0..dh {
                    let src = h * dh * groups * dh + a * groups * dh + gr * dh + b;
                    let dst = (h * dh + a) * cols + gr * d + h * dh + b;
                    f(src, dst);
                }
            }
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.with_node(self.id, |n| n.shape.clone())
    }

    pub fn numel(&self) -> usize {
        self.tape.with_node(self.id, |n| n.value.len())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.tape.with_node(self.id, |n| n.value.clone())
    }

    pub fn value(&self) -> Tensor {
        self.tape.with_node(self.id, |n| {
            Tensor::from_vec(&n.shape, n.value.clone()).expect("recorded node has a valid shape")
        })
    }

    pub fn item(&self) -> f64 {
        self.tape.with_node(self.id, |n| n.value[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.with_node(self.id, |n| n.requires_grad)
    }

    fn rg(&self) -> bool {
        self.requires_grad()
    }

    fn same_tape(&self, other: &Var<'t>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::invalid("operands recorded on different tapes"))
        }
    }

    fn map_unary(self, kind: UnaryKind, f: impl Fn(f64) -> f64) -> Var<'t> {
        let (shape, value) = self
            .tape
            .with_node(self.id, |n| (n.shape.clone(), n.value.iter().map(|&v| f(v)).collect()));
        self.tape.push(shape, value, Op::Unary { x: self.id, kind }, self.rg())
    }

    pub fn exp(self) -> Var<'t> {
        self.map_unary(UnaryKind::Exp, f64::exp)
    }

    /// Natural logarithm; fails on non-positive entries.
    pub fn log(self) -> Result<Var<'t>> {
        let bad = self.tape.with_node(self.id, |n| n.value.iter().any(|&v| v <= 0.0));
        if bad {
            return Err(Error::invalid("log of a non-positive value"));
        }
        Ok(self.map_unary(UnaryKind::Log, f64::ln))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.map_unary(UnaryKind::Sigmoid, sigmoid)
    }

    /// `log σ(x)`, evaluated without forming `σ(x)`.
    pub fn log_sigmoid(self) -> Var<'t> {
        self.map_unary(UnaryKind::LogSigmoid, log_sigmoid)
    }

    pub fn tanh(self) -> Var<'t> {
        self.map_unary(UnaryKind::Tanh, f64::tanh)
    }

    pub fn neg(self) -> Var<'t> {
        self.map_unary(UnaryKind::Neg, |v| -v)
    }

    pub fn abs(self) -> Var<'t> {
        self.map_unary(UnaryKind::Abs, f64::abs)
    }

    pub fn square(self) -> Var<'t> {
        self.map_unary(UnaryKind::Square, |v| v * v)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let (shape, value) = self
            .tape
            .with_node(self.id, |n| (n.shape.clone(), n.value.iter().map(|&v| v * c).collect()));
        self.tape.push(shape, value, Op::Scale { x: self.id, c }, self.rg())
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let (shape, value) = self
            .tape
            .with_node(self.id, |n| (n.shape.clone(), n.value.iter().map(|&v| v + c).collect()));
        self.tape.push(shape, value, Op::AddScalar { x: self.id }, self.rg())
    }

    /// Elementwise `max(x, c)`.
    pub fn max_scalar(self, c: f64) -> Var<'t> {
        let (shape, value) = self.tape.with_node(self.id, |n| {
            (n.shape.clone(), n.value.iter().map(|&v| v.max(c)).collect())
        });
        self.tape.push(shape, value, Op::MaxScalar { x: self.id, c }, self.rg())
    }

    pub fn powf(self, p: f64) -> Var<'t> {
        let (shape, value) = self.tape.with_node(self.id, |n| {
            (n.shape.clone(), n.value.iter().map(|&v| v.powf(p)).collect())
        });
        self.tape.push(shape, value, Op::Powf { x: self.id, p }, self.rg())
    }

    fn binary_mapped(self, other: Var<'t>, kind: BinaryKind, shape: Vec<usize>, map_a: Bcast, map_b: Bcast) -> Var<'t> {
        let numel: usize = shape.iter().product();
        let value = {
            let inner = self.tape.inner.borrow();
            let av = &inner.nodes[self.id].value;
            let bv = &inner.nodes[other.id].value;
            (0..numel)
                .map(|p| apply_binary(kind, av[map_a.index(p)], bv[map_b.index(p)]))
                .collect()
        };
        let rg = self.rg() || other.rg();
        self.tape.push(
            shape,
            value,
            Op::Binary {
                a: self.id,
                b: other.id,
                kind,
                map_a,
                map_b,
            },
            rg,
        )
    }

    /// Elementwise binary op on equal shapes, or with a one-element operand
    /// broadcast as a scalar.
    pub fn binary(self, other: Var<'t>, kind: BinaryKind) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let (sa, sb) = (self.shape(), other.shape());
        let (shape, ma, mb) =
            bcast_maps(&sa, &sb).ok_or_else(|| Error::shape(format!("{kind:?} of {sa:?} and {sb:?}")))?;
        Ok(self.binary_mapped(other, kind, shape, ma, mb))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Add)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Sub)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Mul)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Div)
    }

    /// `self ∘ row` where `row`'s shape equals the trailing dims of `self`.
    pub fn row_op(self, row: Var<'t>, kind: BinaryKind) -> Result<Var<'t>> {
        self.same_tape(&row)?;
        let (sx, sr) = (self.shape(), row.shape());
        if sr.len() > sx.len() || sx[sx.len() - sr.len()..] != sr[..] {
            return Err(Error::shape(format!("row broadcast of {sr:?} onto {sx:?}")));
        }
        let n = sr.iter().product();
        Ok(self.binary_mapped(row, kind, sx, Bcast::Same, Bcast::Row(n)))
    }

    /// `self ∘ col` where `col`'s shape equals the leading dims of `self`.
    pub fn col_op(self, col: Var<'t>, kind: BinaryKind) -> Result<Var<'t>> {
        self.same_tape(&col)?;
        let (sx, sc) = (self.shape(), col.shape());
        if sc.len() > sx.len() || sx[..sc.len()] != sc[..] {
            return Err(Error::shape(format!("column broadcast of {sc:?} onto {sx:?}")));
        }
        let inner = sx[sc.len()..].iter().product();
        Ok(self.binary_mapped(col, kind, sx, Bcast::Same, Bcast::Col(inner)))
    }

    pub fn add_row(self, row: Var<'t>) -> Result<Var<'t>> {
        self.row_op(row, BinaryKind::Add)
    }

    pub fn mul_row(self, row: Var<'t>) -> Result<Var<'t>> {
        self.row_op(row, BinaryKind::Mul)
    }

    pub fn mul_col(self, col: Var<'t>) -> Result<Var<'t>> {
        self.col_op(col, BinaryKind::Mul)
    }

    pub fn div_col(self, col: Var<'t>) -> Result<Var<'t>> {
        self.col_op(col, BinaryKind::Div)
    }

    pub fn sub_col(self, col: Var<'t>) -> Result<Var<'t>> {
        self.col_op(col, BinaryKind::Sub)
    }

    /// Elementwise maximum of two equally shaped values.
    pub fn maximum(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let (sa, sb) = (self.shape(), other.shape());
        if sa != sb {
            return Err(Error::shape(format!("maximum of {sa:?} and {sb:?}")));
        }
        let value = {
            let inner = self.tape.inner.borrow();
            let av = &inner.nodes[self.id].value;
            let bv = &inner.nodes[other.id].value;
            av.iter().zip(bv).map(|(a, b)| a.max(*b)).collect()
        };
        let rg = self.rg() || other.rg();
        Ok(self.tape.push(
            sa,
            value,
            Op::Maximum {
                a: self.id,
                b: other.id,
            },
            rg,
        ))
    }

    /// `[.., k] · [k, n] -> [.., n]`; leading dims of `self` act as rows.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::shape(format!("matmul of {sa:?} and {sb:?}")));
        }
        let (k, n) = (sb[0], sb[1]);
        let m = sa.iter().product::<usize>() / k;
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        self.record_matmul(other, shape, 1, m, k, n, false, false, true)
    }

    /// Batched product `[N, m, k] · [N, k, n]`, with optional transposes of
    /// the stored per-batch matrices.
    pub fn bmm(self, other: Var<'t>, trans_a: bool, trans_b: bool) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::shape(format!("bmm of {sa:?} and {sb:?}")));
        }
        let (m, k) = if trans_a { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (k2, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != k2 {
            return Err(Error::shape(format!(
                "bmm inner dims differ: {sa:?}{} · {sb:?}{}",
                if trans_a { "ᵀ" } else { "" },
                if trans_b { "ᵀ" } else { "" }
            )));
        }
        self.record_matmul(other, vec![sa[0], m, n], sa[0], m, k, n, trans_a, trans_b, false)
    }

    #[allow(clippy::too_many_arguments)]
    fn record_matmul(
        self,
        other: Var<'t>,
        shape: Vec<usize>,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        ta: bool,
        tb: bool,
        shared_b: bool,
    ) -> Result<Var<'t>> {
        let value = {
            let inner = self.tape.inner.borrow();
            let av = &inner.nodes[self.id].value;
            let bv = &inner.nodes[other.id].value;
            let mut out = vec![0.0; batch * m * n];
            let b_stride = if shared_b { 0 } else { k * n };
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &av[i * m * k..(i + 1) * m * k],
                    ta,
                    &bv[i * b_stride..i * b_stride + k * n],
                    tb,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
            out
        };
        let rg = self.rg() || other.rg();
        Ok(self.tape.push(
            shape,
            value,
            Op::MatMul {
                a: self.id,
                b: other.id,
                batch,
                m,
                k,
                n,
                ta,
                tb,
                shared_b,
            },
            rg,
        ))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let numel = check_shape(shape)?;
        if numel != self.numel() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape()
            )));
        }
        let value = self.to_vec();
        Ok(self
            .tape
            .push(shape.to_vec(), value, Op::Reshape { x: self.id }, self.rg()))
    }

    pub fn permute(self, perm: &[usize]) -> Result<Var<'t>> {
        let shape = self.shape();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm
                .iter()
                .any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::shape(format!("invalid permutation {perm:?} for {shape:?}")));
        }
        let (out_shape, map) = permute_map(&shape, perm);
        let value = self
            .tape
            .with_node(self.id, |n| map.iter().map(|&s| n.value[s]).collect());
        Ok(self
            .tape
            .push(out_shape, value, Op::Permute { x: self.id, map }, self.rg()))
    }

    /// Contiguous slice `start..start+len` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape(format!("narrow({axis}, {start}, {len}) of {shape:?}")));
        }
        let (outer, len_in, inner) = split_axis(&shape, axis);
        let value = self.tape.with_node(self.id, |n| {
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let src = o * len_in * inner + start * inner;
                out.extend_from_slice(&n.value[src..src + len * inner]);
            }
            out
        });
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.tape.push(
            out_shape,
            value,
            Op::Narrow {
                x: self.id,
                outer,
                len_in,
                start,
                len,
                inner,
            },
            self.rg(),
        ))
    }

    /// Index `idx` along `axis`, removing that axis.
    pub fn select(self, axis: usize, idx: usize) -> Result<Var<'t>> {
        let mut shape = self.shape();
        let v = self.narrow(axis, idx, 1)?;
        shape.remove(axis);
        if shape.is_empty() {
            return v.reshape(&[]);
        }
        v.reshape(&shape)
    }

    /// Concatenates along `axis`; all other dims must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat of zero parts"))?;
        let tape = first.tape;
        let base = first.shape();
        if axis >= base.len() {
            return Err(Error::shape(format!("concat axis {axis} for {base:?}")));
        }
        let mut lens = Vec::with_capacity(parts.len());
        for p in parts {
            first.same_tape(p)?;
            let s = p.shape();
            if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(d, (a, b))| d != axis && a != b) {
                return Err(Error::shape(format!("concat of {base:?} and {s:?} on axis {axis}")));
            }
            lens.push((p.id, s[axis]));
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let total: usize = lens.iter().map(|(_, l)| l).sum();
        let value = {
            let tin = tape.inner.borrow();
            let mut out = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for &(pid, len) in &lens {
                    let v = &tin.nodes[pid].value;
                    out.extend_from_slice(&v[o * len * inner..(o + 1) * len * inner]);
                }
            }
            out
        };
        let mut shape = base;
        shape[axis] = total;
        let rg = parts.iter().any(|p| p.rg());
        Ok(tape.push(
            shape,
            value,
            Op::Concat {
                parts: lens,
                outer,
                inner,
            },
            rg,
        ))
    }

    /// Stacks equally shaped parts along a new `axis`.
    pub fn stack(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| Error::invalid("stack of zero parts"))?;
        let mut s = first.shape();
        if axis > s.len() {
            return Err(Error::shape(format!("stack axis {axis} for {s:?}")));
        }
        s.insert(axis, 1);
        let expanded = parts.iter().map(|p| p.reshape(&s)).collect::<Result<Vec<_>>>()?;
        Var::concat(&expanded, axis)
    }

    /// Softmax over the last axis of `self / temperature`.
    pub fn softmax_rows(self, temperature: f64) -> Result<Var<'t>> {
        if !(temperature > 0.0) {
            return Err(Error::invalid(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        let shape = self.shape();
        let n = *shape.last().ok_or_else(|| Error::shape("softmax of a scalar"))?;
        let value = self.tape.with_node(self.id, |node| {
            let mut out = vec![0.0; node.value.len()];
            for (row, o) in node.value.chunks(n).zip(out.chunks_mut(n)) {
                softmax_into(row, temperature, o);
            }
            out
        });
        Ok(self.tape.push(
            shape,
            value,
            Op::Softmax {
                x: self.id,
                n,
                temp: temperature,
            },
            self.rg(),
        ))
    }

    /// Log-softmax over the last axis of `self / temperature`, via log-sum-exp.
    pub fn log_softmax_rows(self, temperature: f64) -> Result<Var<'t>> {
        if !(temperature > 0.0) {
            return Err(Error::invalid(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        let shape = self.shape();
        let n = *shape.last().ok_or_else(|| Error::shape("log-softmax of a scalar"))?;
        let value = self.tape.with_node(self.id, |node| {
            let mut out = vec![0.0; node.value.len()];
            for (row, o) in node.value.chunks(n).zip(out.chunks_mut(n)) {
                let lse = log_sum_exp(row, temperature);
                for (oj, &v) in o.iter_mut().zip(row) {
                    *oj = v / temperature - lse;
                }
            }
            out
        });
        Ok(self.tape.push(
            shape,
            value,
            Op::LogSoftmax {
                x: self.id,
                n,
                temp: temperature,
            },
            self.rg(),
        ))
    }

    fn reduce(self, kind: ReduceKind, axis: Option<usize>) -> Result<Var<'t>> {
        let shape = self.shape();
        let (outer, len, inner, out_shape) = match axis {
            None => (1, self.numel(), 1, Vec::new()),
            Some(a) if a < shape.len() => {
                let (o, l, i) = split_axis(&shape, a);
                let mut s = shape.clone();
                s.remove(a);
                (o, l, i, s)
            }
            Some(a) => return Err(Error::shape(format!("axis {a} out of range for {shape:?}"))),
        };
        let mut argmax = Vec::new();
        let value = self.tape.with_node(self.id, |n| {
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |l: usize| n.value[(o * len + l) * inner + i];
                    out[o * inner + i] = match kind {
                        ReduceKind::Sum => (0..len).map(at).sum(),
                        ReduceKind::Mean => (0..len).map(at).sum::<f64>() / len as f64,
                        ReduceKind::Max => {
                            let mut best = 0;
                            for l in 1..len {
                                if at(l) > at(best) {
                                    best = l;
                                }
                            }
                            argmax.push(best);
                            at(best)
                        }
                    };
                }
            }
            out
        });
        Ok(self.tape.push(
            out_shape,
            value,
            Op::Reduce {
                x: self.id,
                kind,
                outer,
                len,
                inner,
                argmax,
            },
            self.rg(),
        ))
    }

    pub fn sum(self) -> Var<'t> {
        self.reduce(ReduceKind::Sum, None)
            .expect("full reduction is always valid")
    }

    pub fn mean(self) -> Var<'t> {
        self.reduce(ReduceKind::Mean, None)
            .expect("full reduction is always valid")
    }

    pub fn max(self) -> Var<'t> {
        self.reduce(ReduceKind::Max, None)
            .expect("full reduction is always valid")
    }

    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        self.reduce(ReduceKind::Sum, Some(axis))
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>> {
        self.reduce(ReduceKind::Mean, Some(axis))
    }

    pub fn max_axis(self, axis: usize) -> Result<Var<'t>> {
        self.reduce(ReduceKind::Max, Some(axis))
    }

    /// Square root of the sum of squared entries.
    pub fn frobenius_norm(self) -> Var<'t> {
        let norm = self
            .tape
            .with_node(self.id, |n| n.value.iter().map(|v| v * v).sum::<f64>().sqrt());
        self.tape
            .push(Vec::new(), vec![norm], Op::FrobNorm { x: self.id }, self.rg())
    }

    /// L2 norm of every row along the last axis.
    pub fn row_norms(self) -> Result<Var<'t>> {
        let shape = self.shape();
        let n = *shape.last().ok_or_else(|| Error::shape("row norms of a scalar"))?;
        let value = self.tape.with_node(self.id, |node| {
            node.value
                .chunks(n)
                .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
                .collect()
        });
        let out_shape = if shape.len() == 1 {
            Vec::new()
        } else {
            shape[..shape.len() - 1].to_vec()
        };
        Ok(self
            .tape
            .push(out_shape, value, Op::RowNorms { x: self.id, n }, self.rg()))
    }

    /// Embedding lookup: rows of a `[V, D]` table.
    pub fn gather_rows(self, ids: &[usize]) -> Result<Var<'t>> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(Error::shape(format!("gather_rows needs a matrix, got {shape:?}")));
        }
        let (v, d) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::invalid(format!("row id {bad} out of range for {v} rows")));
        }
        if ids.is_empty() {
            return Err(Error::shape("gather of zero rows"));
        }
        let value = self.tape.with_node(self.id, |n| {
            let mut out = Vec::with_capacity(ids.len() * d);
            for &i in ids {
                out.extend_from_slice(&n.value[i * d..(i + 1) * d]);
            }
            out
        });
        Ok(self.tape.push(
            vec![ids.len(), d],
            value,
            Op::GatherRows {
                table: self.id,
                ids: ids.to_vec(),
                d,
            },
            self.rg(),
        ))
    }

    /// Picks one entry per row along the last axis.
    pub fn pick_last(self, idx: &[usize]) -> Result<Var<'t>> {
        let shape = self.shape();
        let n = *shape.last().ok_or_else(|| Error::shape("pick of a scalar"))?;
        let rows = self.numel() / n;
        if idx.len() != rows {
            return Err(Error::shape(format!("{} indices for {rows} rows", idx.len())));
        }
        if let Some(&bad) = idx.iter().find(|&&j| j >= n) {
            return Err(Error::invalid(format!("index {bad} out of range for {n} classes")));
        }
        let value = self.tape.with_node(self.id, |node| {
            idx.iter().enumerate().map(|(r, &j)| node.value[r * n + j]).collect()
        });
        let out_shape = shape[..shape.len() - 1].to_vec();
        Ok(self.tape.push(
            out_shape,
            value,
            Op::PickLast {
                x: self.id,
                idx: idx.to_vec(),
                n,
            },
            self.rg(),
        ))
    }

    /// Sets entries above the diagonal of each trailing `[S, S]` matrix to
    /// `-inf`.
    pub fn causal_mask(self) -> Result<Var<'t>> {
        let shape = self.shape();
        let r = shape.len();
        if r < 2 || shape[r - 1] != shape[r - 2] {
            return Err(Error::shape(format!(
                "causal mask needs square trailing dims, got {shape:?}"
            )));
        }
        let s = shape[r - 1];
        let value = self.tape.with_node(self.id, |n| {
            let mut out = n.value.clone();
            for mat in out.chunks_mut(s * s) {
                for i in 0..s {
                    for j in i + 1..s {
                        mat[i * s + j] = f64::NEG_INFINITY;
                    }
                }
            }
            out
        });
        Ok(self
            .tape
            .push(shape, value, Op::CausalMask { x: self.id, s }, self.rg()))
    }

    /// Expands per-head blocks `[H, dh, G·dh]` into a block-diagonal
    /// `[H·dh, G·H·dh]` matrix whose column groups are laid out
    /// group-major, head-minor.
    pub fn block_diag(self, groups: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        if shape.len() != 3 || groups == 0 || shape[2] != groups * shape[1] {
            return Err(Error::shape(format!("block_diag({groups}) of {shape:?}")));
        }
        let (heads, dh) = (shape[0], shape[1]);
        let d = heads * dh;
        let value = self.tape.with_node(self.id, |n| {
            let mut out = vec![0.0; d * groups * d];
            for_block_diag(heads, dh, groups, |src, dst| out[dst] = n.value[src]);
            out
        });
        Ok(self.tape.push(
            vec![d, groups * d],
            value,
            Op::BlockDiag {
                x: self.id,
                heads,
                dh,
                groups,
            },
            self.rg(),
        ))
    }
}
