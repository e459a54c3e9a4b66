//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operator evaluates eagerly and appends a node holding its output and
//! whatever it needs for the backward pass. Nodes that depend on no
//! gradient-requiring leaf are stored without backward data.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use super::kernels::{self, ConvGeom};
use super::tensor::Tensor;
use crate::error::{shape_err, usage, Error, Result};

/// Batch-normalization epsilon added to the variance.
pub const BN_EPS: f64 = 1e-7;

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    MatMul(usize, usize),
    Transpose(usize),
    Relu(usize),
    Softplus(usize),
    Exp(usize),
    Log(usize),
    Sum(usize),
    Mean(usize),
    SumCols(usize),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    Reshape(usize),
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        geom: ConvGeom,
    },
    MaxPool2 {
        x: usize,
        argmax: Vec<usize>,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    PairwiseDiff(usize, usize),
    GatherRows(usize, Vec<usize>),
    ConcatRows(Vec<usize>),
    GroupMean(usize, Vec<Vec<usize>>),
    Pick(usize, Vec<usize>),
    NeighborWeights(usize, Vec<Vec<usize>>),
    NeighborSum {
        weights: usize,
        src: usize,
        lists: Vec<Vec<usize>>,
    },
    NeighborMax {
        src: usize,
        winners: Vec<usize>,
    },
    Blend {
        keep: usize,
        mix: usize,
        lambda: f64,
        active: Vec<bool>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Relu(..) => "relu",
            Op::Softplus(..) => "softplus",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumCols(..) => "sum_cols",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::LogSoftmaxRows(..) => "log_softmax_rows",
            Op::Reshape(..) => "reshape",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2 { .. } => "maxpool2",
            Op::BatchNorm { .. } => "batchnorm",
            Op::PairwiseDiff(..) => "pairwise_diff",
            Op::GatherRows(..) => "gather_rows",
            Op::ConcatRows(..) => "concat_rows",
            Op::GroupMean(..) => "group_mean",
            Op::Pick(..) => "pick",
            Op::NeighborWeights(..) => "neighbor_weights",
            Op::NeighborSum { .. } => "neighbor_sum",
            Op::NeighborMax { .. } => "neighbor_max",
            Op::Blend { .. } => "blend",
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Recording context for one differentiable computation (one episode).
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `var`; zeros when the loss does not depend on it.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        let shape = self.shapes[var.id].clone();
        match &self.grads[var.id] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

fn matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        &[r, c] => Ok((r, c)),
        s => shape_err(op, format!("expected a matrix, got {s:?}")),
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Stable softmax of `-d` over `dists`: `exp(-(d - min d)) / sum`.
pub fn softmin_weights(dists: &[f64]) -> Vec<f64> {
    let lo = dists.iter().copied().fold(f64::INFINITY, f64::min);
    let e: Vec<f64> = dists.iter().map(|d| (-(d - lo)).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn softmax_row(z: &[f64], out: &mut [f64]) {
    let hi = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v - hi).exp();
        s += *o;
    }
    for o in out.iter_mut() {
        *o /= s;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A value that participates in differentiation.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.insert(value, Op::Leaf, true)
    }

    /// A value treated as constant by the backward pass.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.insert(value, Op::Leaf, false)
    }

    fn insert(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op: if needs_grad { op } else { Op::Leaf },
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn needs_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    fn record(&self, value: Tensor, op: Op, parents: &[usize]) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let needs_grad = parents.iter().any(|&p| self.needs_grad(p));
        Ok(self.insert(value, op, needs_grad))
    }

    /// Accumulate d`loss`/d(node) for every node on the tape. The tape may
    /// only be differentiated once.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) {
            return usage("backward: loss belongs to a different tape");
        }
        if self.consumed.replace(true) {
            return usage("backward: tape already consumed");
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop_node(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, delta: impl FnOnce(&mut [f64])) {
    if !nodes[id].needs_grad {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.numel()]);
    delta(slot);
}

fn backprop_node(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |id: usize| -> &Tensor { &nodes[id].value };
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        &Op::Add(a, b) => {
            acc(grads, nodes, a, |d| {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += g)
            });
            acc(grads, nodes, b, |d| {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += g)
            });
        }
        &Op::Sub(a, b) => {
            acc(grads, nodes, a, |d| {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += g)
            });
            acc(grads, nodes, b, |d| {
                d.iter_mut().zip(g).for_each(|(d, g)| *d -= g)
            });
        }
        &Op::Mul(a, b) => {
            let (av, bv) = (val(a).data(), val(b).data());
            acc(grads, nodes, a, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * bv[i];
                }
            });
            acc(grads, nodes, b, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * av[i];
                }
            });
        }
        &Op::AddRow(a, bias) => {
            acc(grads, nodes, a, |d| {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += g)
            });
            acc(grads, nodes, bias, |d| {
                let w = d.len();
                for (i, gv) in g.iter().enumerate() {
                    d[i % w] += gv;
                }
            });
        }
        &Op::Scale(a, s) => {
            acc(grads, nodes, a, |d| {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += s * g)
            });
        }
        &Op::MatMul(a, b) => {
            let (av, bv) = (val(a), val(b));
            let p = av.shape()[1];
            let m = bv.shape()[1];
            let (ad, bd) = (av.data(), bv.data());
            // dA = G B^T
            acc(grads, nodes, a, |d| {
                if m == 0 || p == 0 {
                    return;
                }
                for (drow, grow) in d.chunks_exact_mut(p).zip(g.chunks_exact(m)) {
                    for (dv, brow) in drow.iter_mut().zip(bd.chunks_exact(m)) {
                        *dv += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                    }
                }
            });
            // dB = A^T G
            acc(grads, nodes, b, |d| {
                if m == 0 || p == 0 {
                    return;
                }
                for (arow, grow) in ad.chunks_exact(p).zip(g.chunks_exact(m)) {
                    for (&aik, drow) in arow.iter().zip(d.chunks_exact_mut(m)) {
                        if aik == 0.0 {
                            continue;
                        }
                        for (dv, &gv) in drow.iter_mut().zip(grow) {
                            *dv += aik * gv;
                        }
                    }
                }
            });
        }
        &Op::Transpose(a) => {
            let (r, c) = (out.shape()[0], out.shape()[1]);
            acc(grads, nodes, a, |d| {
                for i in 0..r {
                    for j in 0..c {
                        d[j * r + i] += g[i * c + j];
                    }
                }
            });
        }
        &Op::Relu(a) => {
            let x = val(a).data();
            acc(grads, nodes, a, |d| {
                for i in 0..d.len() {
                    if x[i] > 0.0 {
                        d[i] += g[i];
                    }
                }
            });
        }
        &Op::Softplus(a) => {
            let x = val(a).data();
            acc(grads, nodes, a, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * sigmoid(x[i]);
                }
            });
        }
        &Op::Exp(a) => {
            let y = out.data();
            acc(grads, nodes, a, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * y[i];
                }
            });
        }
        &Op::Log(a) => {
            let x = val(a).data();
            acc(grads, nodes, a, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] / x[i];
                }
            });
        }
        &Op::Sum(a) => {
            acc(grads, nodes, a, |d| d.iter_mut().for_each(|d| *d += g[0]));
        }
        &Op::Mean(a) => {
            acc(grads, nodes, a, |d| {
                let s = g[0] / d.len() as f64;
                d.iter_mut().for_each(|d| *d += s);
            });
        }
        &Op::SumCols(a) => {
            acc(grads, nodes, a, |d| {
                let w = d.len() / g.len();
                for (i, gv) in g.iter().enumerate() {
                    d[i * w..(i + 1) * w].iter_mut().for_each(|d| *d += gv);
                }
            });
        }
        &Op::SoftmaxRows(a) => {
            let s = out.data();
            let w = out.shape()[1];
            acc(grads, nodes, a, |d| {
                for r in 0..s.len() / w.max(1) {
                    let (sr, gr) = (&s[r * w..(r + 1) * w], &g[r * w..(r + 1) * w]);
                    let dot: f64 = sr.iter().zip(gr).map(|(s, g)| s * g).sum();
                    for j in 0..w {
                        d[r * w + j] += sr[j] * (gr[j] - dot);
                    }
                }
            });
        }
        &Op::LogSoftmaxRows(a) => {
            let y = out.data();
            let w = out.shape()[1];
            acc(grads, nodes, a, |d| {
                for r in 0..y.len() / w.max(1) {
                    let gr = &g[r * w..(r + 1) * w];
                    let gsum: f64 = gr.iter().sum();
                    for j in 0..w {
                        d[r * w + j] += gr[j] - y[r * w + j].exp() * gsum;
                    }
                }
            });
        }
        &Op::Reshape(a) => {
            acc(grads, nodes, a, |d| {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += g)
            });
        }
        &Op::Conv2d { x, w, b, geom } => {
            let (dx, dw, db) = kernels::conv2d_backward(&geom, val(x).data(), val(w).data(), g);
            acc(grads, nodes, x, |d| {
                d.iter_mut().zip(&dx).for_each(|(d, g)| *d += g)
            });
            acc(grads, nodes, w, |d| {
                d.iter_mut().zip(&dw).for_each(|(d, g)| *d += g)
            });
            acc(grads, nodes, b, |d| {
                d.iter_mut().zip(&db).for_each(|(d, g)| *d += g)
            });
        }
        Op::MaxPool2 { x, argmax } => {
            acc(grads, nodes, *x, |d| {
                for (gv, &src) in g.iter().zip(argmax) {
                    d[src] += gv;
                }
            });
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            batch_stats,
        } => {
            let shape = val(*x).shape();
            let (n, c) = (shape[0], shape[1]);
            let s: usize = shape[2..].iter().product();
            let gam = val(*gamma).data();
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            let mut sum_dxhat = vec![0.0; c];
            let mut sum_dxhat_xhat = vec![0.0; c];
            for b in 0..n {
                for ch in 0..c {
                    for i in (b * c + ch) * s..(b * c + ch + 1) * s {
                        dgamma[ch] += g[i] * xhat[i];
                        dbeta[ch] += g[i];
                        let dxh = g[i] * gam[ch];
                        sum_dxhat[ch] += dxh;
                        sum_dxhat_xhat[ch] += dxh * xhat[i];
                    }
                }
            }
            let count = (n * s) as f64;
            acc(grads, nodes, *x, |d| {
                for b in 0..n {
                    for ch in 0..c {
                        for i in (b * c + ch) * s..(b * c + ch + 1) * s {
                            let dxh = g[i] * gam[ch];
                            d[i] += if *batch_stats {
                                inv_std[ch] / count
                                    * (count * dxh - sum_dxhat[ch] - xhat[i] * sum_dxhat_xhat[ch])
                            } else {
                                dxh * inv_std[ch]
                            };
                        }
                    }
                }
            });
            acc(grads, nodes, *gamma, |d| {
                d.iter_mut().zip(&dgamma).for_each(|(d, g)| *d += g)
            });
            acc(grads, nodes, *beta, |d| {
                d.iter_mut().zip(&dbeta).for_each(|(d, g)| *d += g)
            });
        }
        &Op::PairwiseDiff(a, b) => {
            let (n, dim) = (val(a).shape()[0], val(a).shape()[1]);
            let m = val(b).shape()[0];
            acc(grads, nodes, a, |d| {
                for i in 0..n {
                    for j in 0..m {
                        let row = &g[(i * m + j) * dim..(i * m + j + 1) * dim];
                        d[i * dim..(i + 1) * dim]
                            .iter_mut()
                            .zip(row)
                            .for_each(|(d, g)| *d += g);
                    }
                }
            });
            acc(grads, nodes, b, |d| {
                for i in 0..n {
                    for j in 0..m {
                        let row = &g[(i * m + j) * dim..(i * m + j + 1) * dim];
                        d[j * dim..(j + 1) * dim]
                            .iter_mut()
                            .zip(row)
                            .for_each(|(d, g)| *d -= g);
                    }
                }
            });
        }
        Op::GatherRows(a, idx) => {
            let w = out.row_len();
            acc(grads, nodes, *a, |d| {
                for (r, &src) in idx.iter().enumerate() {
                    d[src * w..(src + 1) * w]
                        .iter_mut()
                        .zip(&g[r * w..(r + 1) * w])
                        .for_each(|(d, g)| *d += g);
                }
            });
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let len = val(p).numel();
                acc(grads, nodes, p, |d| {
                    d.iter_mut()
                        .zip(&g[offset..offset + len])
                        .for_each(|(d, g)| *d += g)
                });
                offset += len;
            }
        }
        Op::GroupMean(a, groups) => {
            let w = out.row_len();
            acc(grads, nodes, *a, |d| {
                for (gi, members) in groups.iter().enumerate() {
                    let inv = 1.0 / members.len() as f64;
                    for &src in members {
                        for k in 0..w {
                            d[src * w + k] += g[gi * w + k] * inv;
                        }
                    }
                }
            });
        }
        Op::Pick(a, labels) => {
            let w = val(*a).shape()[1];
            acc(grads, nodes, *a, |d| {
                for (r, &l) in labels.iter().enumerate() {
                    d[r * w + l] += g[r];
                }
            });
        }
        Op::NeighborWeights(dist, lists) => {
            let m = val(*dist).shape()[1];
            let wts = out.data();
            acc(grads, nodes, *dist, |d| {
                let mut off = 0;
                for (i, list) in lists.iter().enumerate() {
                    let (wr, gr) = (&wts[off..off + list.len()], &g[off..off + list.len()]);
                    let dot: f64 = wr.iter().zip(gr).map(|(w, g)| w * g).sum();
                    for (t, &j) in list.iter().enumerate() {
                        // weights are a softmax of the negated distances
                        d[i * m + j] -= wr[t] * (gr[t] - dot);
                    }
                    off += list.len();
                }
            });
        }
        Op::NeighborSum {
            weights,
            src,
            lists,
        } => {
            let dim = out.shape()[1];
            let (wv, sv) = (val(*weights).data(), val(*src).data());
            acc(grads, nodes, *weights, |d| {
                let mut off = 0;
                for (i, list) in lists.iter().enumerate() {
                    let gr = &g[i * dim..(i + 1) * dim];
                    for (t, &j) in list.iter().enumerate() {
                        let sr = &sv[j * dim..(j + 1) * dim];
                        d[off + t] += gr.iter().zip(sr).map(|(g, s)| g * s).sum::<f64>();
                    }
                    off += list.len();
                }
            });
            acc(grads, nodes, *src, |d| {
                let mut off = 0;
                for (i, list) in lists.iter().enumerate() {
                    let gr = &g[i * dim..(i + 1) * dim];
                    for (t, &j) in list.iter().enumerate() {
                        let w = wv[off + t];
                        d[j * dim..(j + 1) * dim]
                            .iter_mut()
                            .zip(gr)
                            .for_each(|(d, g)| *d += w * g);
                    }
                    off += list.len();
                }
            });
        }
        Op::NeighborMax { src, winners } => {
            acc(grads, nodes, *src, |d| {
                for (gv, &w) in g.iter().zip(winners) {
                    if w != usize::MAX {
                        d[w] += gv;
                    }
                }
            });
        }
        Op::Blend {
            keep,
            mix,
            lambda,
            active,
        } => {
            let w = out.row_len();
            acc(grads, nodes, *keep, |d| {
                for (r, &on) in active.iter().enumerate() {
                    let s = if on { *lambda } else { 1.0 };
                    for k in r * w..(r + 1) * w {
                        d[k] += s * g[k];
                    }
                }
            });
            acc(grads, nodes, *mix, |d| {
                for (r, &on) in active.iter().enumerate() {
                    if on {
                        for k in r * w..(r + 1) * w {
                            d[k] += (1.0 - lambda) * g[k];
                        }
                    }
                }
            });
        }
    }
}

/// Output of [`Var::batch_norm`] in batch-statistics mode.
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased per-channel variance (used for running estimates).
    pub var: Vec<f64>,
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// The single value of a scalar-like var.
    pub fn item(&self) -> f64 {
        self.value().data()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.needs_grad(self.id)
    }

    fn check_tape(&self, other: &Var<'t>, op: &'static str) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            usage(format!("{op}: operands recorded on different tapes"))
        }
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Result<Var<'t>> {
        let out = self.value().map(f);
        self.tape.record(out, op, &[self.id])
    }

    fn zip(&self, other: &Var<'t>, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var<'t>> {
        self.check_tape(other, op.name())?;
        let (a, b) = (self.value(), other.value());
        same_shape(op.name(), &a, &b)?;
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::new(a.shape().to_vec(), data)?;
        self.tape.record(out, op, &[self.id, other.id])
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.zip(other, Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.zip(other, Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.zip(other, Op::Mul(self.id, other.id), |a, b| a * b)
    }

    /// Broadcast-add a bias over the last axis.
    pub fn add_row(&self, bias: &Var<'t>) -> Result<Var<'t>> {
        self.check_tape(bias, "add_row")?;
        let (a, b) = (self.value(), bias.value());
        let w = b.numel();
        if b.rank() != 1 || a.shape().last() != Some(&w) {
            return shape_err("add_row", format!("{:?} + bias {:?}", a.shape(), b.shape()));
        }
        let data = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + b.data()[i % w])
            .collect();
        let out = Tensor::new(a.shape().to_vec(), data)?;
        self.tape
            .record(out, Op::AddRow(self.id, bias.id), &[self.id, bias.id])
    }

    pub fn scale(&self, s: f64) -> Result<Var<'t>> {
        self.unary(Op::Scale(self.id, s), |v| v * s)
    }

    pub fn neg(&self) -> Result<Var<'t>> {
        self.scale(-1.0)
    }

    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.check_tape(other, "matmul")?;
        let (a, b) = (self.value(), other.value());
        let (n, p) = matrix("matmul", &a)?;
        let (p2, m) = matrix("matmul", &b)?;
        if p != p2 {
            return shape_err("matmul", format!("{:?} x {:?}", a.shape(), b.shape()));
        }
        let (ad, bd) = (a.data(), b.data());
        let mut out = vec![0.0; n * m];
        if m > 0 && p > 0 {
            for (orow, arow) in out.chunks_exact_mut(m).zip(ad.chunks_exact(p)) {
                for (&aik, brow) in arow.iter().zip(bd.chunks_exact(m)) {
                    for (o, &b) in orow.iter_mut().zip(brow) {
                        *o += aik * b;
                    }
                }
            }
        }
        let out = Tensor::new(vec![n, m], out)?;
        self.tape
            .record(out, Op::MatMul(self.id, other.id), &[self.id, other.id])
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let a = self.value();
        let (r, c) = matrix("transpose", &a)?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = a.data()[i * c + j];
            }
        }
        let out = Tensor::new(vec![c, r], out)?;
        self.tape.record(out, Op::Transpose(self.id), &[self.id])
    }

    pub fn relu(&self) -> Result<Var<'t>> {
        self.unary(Op::Relu(self.id), |v| v.max(0.0))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&self) -> Result<Var<'t>> {
        self.unary(Op::Softplus(self.id), softplus)
    }

    pub fn exp(&self) -> Result<Var<'t>> {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    pub fn log(&self) -> Result<Var<'t>> {
        self.unary(Op::Log(self.id), f64::ln)
    }

    pub fn sum(&self) -> Result<Var<'t>> {
        let s = self.value().data().iter().sum();
        self.tape
            .record(Tensor::scalar(s), Op::Sum(self.id), &[self.id])
    }

    pub fn mean(&self) -> Result<Var<'t>> {
        let v = self.value();
        if v.numel() == 0 {
            return shape_err("mean", "empty tensor");
        }
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.tape
            .record(Tensor::scalar(s), Op::Mean(self.id), &[self.id])
    }

    /// Sum over all but the leading axis: `(n, ...) -> (n)`.
    pub fn sum_cols(&self) -> Result<Var<'t>> {
        let v = self.value();
        let data = (0..v.rows()).map(|i| v.row(i).iter().sum()).collect();
        self.tape.record(
            Tensor::new(vec![v.rows()], data)?,
            Op::SumCols(self.id),
            &[self.id],
        )
    }

    pub fn softmax_rows(&self) -> Result<Var<'t>> {
        let v = self.value();
        let (r, c) = matrix("softmax_rows", &v)?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            softmax_row(v.row(i), &mut out[i * c..(i + 1) * c]);
        }
        self.tape.record(
            Tensor::new(vec![r, c], out)?,
            Op::SoftmaxRows(self.id),
            &[self.id],
        )
    }

    pub fn log_softmax_rows(&self) -> Result<Var<'t>> {
        let v = self.value();
        let (r, c) = matrix("log_softmax_rows", &v)?;
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = v.row(i);
            let hi = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = hi + row.iter().map(|x| (x - hi).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|x| x - lse));
        }
        self.tape.record(
            Tensor::new(vec![r, c], out)?,
            Op::LogSoftmaxRows(self.id),
            &[self.id],
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let out = (*self.value()).clone().reshape(shape.to_vec())?;
        self.tape.record(out, Op::Reshape(self.id), &[self.id])
    }

    /// `(n, ...) -> (n, prod(...))`.
    pub fn flatten(&self) -> Result<Var<'t>> {
        let v = self.value();
        self.reshape(&[v.rows(), v.row_len()])
    }

    /// Stride-1 2-D convolution of an NCHW batch with an `(O, C, kh, kw)` kernel.
    pub fn conv2d(&self, weight: &Var<'t>, bias: &Var<'t>, pad: usize) -> Result<Var<'t>> {
        self.check_tape(weight, "conv2d")?;
        self.check_tape(bias, "conv2d")?;
        let (x, w, b) = (self.value(), weight.value(), bias.value());
        let (&[n, c, h, wd], &[o, c2, kh, kw]) = (x.shape(), w.shape()) else {
            return shape_err(
                "conv2d",
                format!("input {:?}, kernel {:?}", x.shape(), w.shape()),
            );
        };
        if c != c2 || b.shape() != [o] || h + 2 * pad < kh || wd + 2 * pad < kw {
            return shape_err(
                "conv2d",
                format!(
                    "input {:?}, kernel {:?}, bias {:?}, pad {pad}",
                    x.shape(),
                    w.shape(),
                    b.shape()
                ),
            );
        }
        let geom = ConvGeom {
            n,
            c,
            h,
            w: wd,
            o,
            kh,
            kw,
            pad,
        };
        let data = kernels::conv2d_forward(&geom, x.data(), w.data(), b.data());
        let out = Tensor::new(vec![n, o, geom.out_h(), geom.out_w()], data)?;
        let op = Op::Conv2d {
            x: self.id,
            w: weight.id,
            b: bias.id,
            geom,
        };
        self.tape.record(out, op, &[self.id, weight.id, bias.id])
    }

    /// 2x2 max pool, stride 2, floor division of odd extents.
    pub fn maxpool2(&self) -> Result<Var<'t>> {
        let x = self.value();
        let &[n, c, h, w] = x.shape() else {
            return shape_err("maxpool2", format!("expected NCHW, got {:?}", x.shape()));
        };
        if h < 2 || w < 2 {
            return shape_err("maxpool2", format!("spatial extent {h}x{w} below 2x2"));
        }
        let (data, argmax) = kernels::maxpool2_forward(x.data(), n * c, h, w);
        let out = Tensor::new(vec![n, c, h / 2, w / 2], data)?;
        self.tape
            .record(out, Op::MaxPool2 { x: self.id, argmax }, &[self.id])
    }

    /// Per-channel batch normalization of an `(N, C)` or `(N, C, H, W)` input.
    ///
    /// With `running = None` the batch statistics are used (training mode) and
    /// returned for the caller's running estimates; otherwise the given
    /// `(mean, var)` are used.
    pub fn batch_norm(
        &self,
        gamma: &Var<'t>,
        beta: &Var<'t>,
        running: Option<(&[f64], &[f64])>,
    ) -> Result<(Var<'t>, Option<BatchStats>)> {
        self.check_tape(gamma, "batchnorm")?;
        self.check_tape(beta, "batchnorm")?;
        let x = self.value();
        if x.rank() < 2 {
            return shape_err(
                "batchnorm",
                format!("expected (N, C, ...), got {:?}", x.shape()),
            );
        }
        let (n, c) = (x.shape()[0], x.shape()[1]);
        let s: usize = x.shape()[2..].iter().product();
        if gamma.value().shape() != [c] || beta.value().shape() != [c] {
            return shape_err(
                "batchnorm",
                format!(
                    "{c} channels, affine {:?}/{:?}",
                    gamma.shape(),
                    beta.shape()
                ),
            );
        }
        let (mean, var, stats) = match running {
            Some((m, v)) => {
                if m.len() != c || v.len() != c {
                    return shape_err("batchnorm", "running statistics length");
                }
                (m.to_vec(), v.to_vec(), None)
            }
            None => {
                if n < 2 {
                    return usage("batchnorm in training mode needs a batch of at least 2");
                }
                let (m, v) = kernels::channel_stats(x.data(), n, c, s);
                let count = (n * s) as f64;
                let unbiased = v.iter().map(|v| v * count / (count - 1.0)).collect();
                let stats = BatchStats {
                    mean: m.clone(),
                    var: unbiased,
                };
                (m, v, Some(stats))
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (gv, bv) = (gamma.value(), beta.value());
        let mut xhat = vec![0.0; x.numel()];
        let mut out = vec![0.0; x.numel()];
        for b in 0..n {
            for ch in 0..c {
                for i in (b * c + ch) * s..(b * c + ch + 1) * s {
                    xhat[i] = (x.data()[i] - mean[ch]) * inv_std[ch];
                    out[i] = gv.data()[ch] * xhat[i] + bv.data()[ch];
                }
            }
        }
        let op = Op::BatchNorm {
            x: self.id,
            gamma: gamma.id,
            beta: beta.id,
            xhat,
            inv_std,
            batch_stats: stats.is_some(),
        };
        let out = Tensor::new(x.shape().to_vec(), out)?;
        let var = self.tape.record(out, op, &[self.id, gamma.id, beta.id])?;
        Ok((var, stats))
    }

    /// All row differences: row `i * m + j` is `self[i] - other[j]`.
    pub fn pairwise_diff(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.check_tape(other, "pairwise_diff")?;
        let (a, b) = (self.value(), other.value());
        let (n, d) = matrix("pairwise_diff", &a)?;
        let (m, d2) = matrix("pairwise_diff", &b)?;
        if d != d2 {
            return shape_err(
                "pairwise_diff",
                format!("{:?} vs {:?}", a.shape(), b.shape()),
            );
        }
        let mut out = Vec::with_capacity(n * m * d);
        for i in 0..n {
            let ai = a.row(i);
            for j in 0..m {
                out.extend(ai.iter().zip(b.row(j)).map(|(x, y)| x - y));
            }
        }
        let out = Tensor::new(vec![n * m, d], out)?;
        self.tape.record(
            out,
            Op::PairwiseDiff(self.id, other.id),
            &[self.id, other.id],
        )
    }

    /// Select rows (along the leading axis) by index.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        if let Some(&bad) = idx.iter().find(|&&i| i >= v.rows()) {
            return shape_err("gather_rows", format!("row {bad} of {}", v.rows()));
        }
        let mut data = Vec::with_capacity(idx.len() * v.row_len());
        for &i in idx {
            data.extend_from_slice(v.row(i));
        }
        let mut shape = v.shape().to_vec();
        shape[0] = idx.len();
        let out = Tensor::new(shape, data)?;
        self.tape
            .record(out, Op::GatherRows(self.id, idx.to_vec()), &[self.id])
    }

    pub fn slice_rows(&self, range: std::ops::Range<usize>) -> Result<Var<'t>> {
        self.gather_rows(&range.collect::<Vec<_>>())
    }

    /// Stack along the leading axis.
    pub fn concat_rows(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let Some(first) = parts.first() else {
            return shape_err("concat_rows", "no inputs");
        };
        let tail = first.value().shape()[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            first.check_tape(p, "concat_rows")?;
            let v = p.value();
            if v.shape()[1..] != tail[..] {
                return shape_err("concat_rows", format!("{:?} vs {:?}", v.shape(), tail));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        first
            .tape
            .record(Tensor::new(shape, data)?, Op::ConcatRows(ids.clone()), &ids)
    }

    /// Row `g` of the output is the arithmetic mean of rows `groups[g]`.
    pub fn group_mean(&self, groups: &[Vec<usize>]) -> Result<Var<'t>> {
        let v = self.value();
        let w = v.row_len();
        let mut data = Vec::with_capacity(groups.len() * w);
        for members in groups {
            if members.is_empty() {
                return usage("group_mean: empty group");
            }
            let mut acc = vec![0.0; w];
            for &r in members {
                if r >= v.rows() {
                    return shape_err("group_mean", format!("row {r} of {}", v.rows()));
                }
                acc.iter_mut().zip(v.row(r)).for_each(|(a, x)| *a += x);
            }
            let k = members.len() as f64;
            data.extend(acc.into_iter().map(|a| a / k));
        }
        let mut shape = v.shape().to_vec();
        shape[0] = groups.len();
        let out = Tensor::new(shape, data)?;
        self.tape
            .record(out, Op::GroupMean(self.id, groups.to_vec()), &[self.id])
    }

    /// `out[r] = self[r, labels[r]]` for an `(n, C)` matrix.
    pub fn pick(&self, labels: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        let (r, c) = matrix("pick", &v)?;
        if labels.len() != r {
            return shape_err("pick", format!("{r} rows, {} labels", labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return usage(format!("label {bad} outside 0..{c}"));
        }
        let data = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| v.at2(i, l))
            .collect();
        self.tape.record(
            Tensor::new(vec![r], data)?,
            Op::Pick(self.id, labels.to_vec()),
            &[self.id],
        )
    }

    /// Softmin attention over each row's neighbor list of an `(n, m)` distance
    /// matrix. Output is flat, concatenated in list order.
    pub fn neighbor_weights(&self, lists: &[Vec<usize>]) -> Result<Var<'t>> {
        let v = self.value();
        let (n, m) = matrix("neighbor_weights", &v)?;
        if lists.len() != n || lists.iter().flatten().any(|&j| j >= m) {
            return shape_err("neighbor_weights", "neighbor lists do not index the matrix");
        }
        let mut data = Vec::new();
        for (i, list) in lists.iter().enumerate() {
            let d: Vec<f64> = list.iter().map(|&j| v.at2(i, j)).collect();
            data.extend(softmin_weights(&d));
        }
        let out = Tensor::from_vec(data);
        self.tape.record(
            out,
            Op::NeighborWeights(self.id, lists.to_vec()),
            &[self.id],
        )
    }

    /// `out[i] = sum_t weights[off_i + t] * src[lists[i][t]]`.
    pub fn neighbor_sum(weights: &Var<'t>, src: &Var<'t>, lists: &[Vec<usize>]) -> Result<Var<'t>> {
        weights.check_tape(src, "neighbor_sum")?;
        let (wv, sv) = (weights.value(), src.value());
        let (m, dim) = matrix("neighbor_sum", &sv)?;
        let total: usize = lists.iter().map(Vec::len).sum();
        if wv.numel() != total || lists.iter().flatten().any(|&j| j >= m) {
            return shape_err("neighbor_sum", "weights/lists/source disagree");
        }
        let mut data = vec![0.0; lists.len() * dim];
        let mut off = 0;
        for (i, list) in lists.iter().enumerate() {
            let row = &mut data[i * dim..(i + 1) * dim];
            for (t, &j) in list.iter().enumerate() {
                let w = wv.data()[off + t];
                row.iter_mut().zip(sv.row(j)).for_each(|(r, s)| *r += w * s);
            }
            off += list.len();
        }
        let out = Tensor::new(vec![lists.len(), dim], data)?;
        let op = Op::NeighborSum {
            weights: weights.id,
            src: src.id,
            lists: lists.to_vec(),
        };
        weights.tape.record(out, op, &[weights.id, src.id])
    }

    /// Elementwise maximum over each row's neighbors; empty lists give zeros.
    pub fn neighbor_max(src: &Var<'t>, lists: &[Vec<usize>]) -> Result<Var<'t>> {
        let sv = src.value();
        let (m, dim) = matrix("neighbor_max", &sv)?;
        if lists.iter().flatten().any(|&j| j >= m) {
            return shape_err("neighbor_max", "neighbor index out of range");
        }
        let mut data = vec![0.0; lists.len() * dim];
        let mut winners = vec![usize::MAX; lists.len() * dim];
        for (i, list) in lists.iter().enumerate() {
            for k in 0..dim {
                if let Some(&best) =
                    list.iter()
                        .reduce(|a, b| if sv.at2(*b, k) > sv.at2(*a, k) { b } else { a })
                {
                    data[i * dim + k] = sv.at2(best, k);
                    winners[i * dim + k] = best * dim + k;
                }
            }
        }
        let out = Tensor::new(vec![lists.len(), dim], data)?;
        src.tape.record(
            out,
            Op::NeighborMax {
                src: src.id,
                winners,
            },
            &[src.id],
        )
    }

    /// Row-wise `lambda * self + (1 - lambda) * mix` on active rows; inactive
    /// rows copy `self` unchanged.
    pub fn blend(&self, mix: &Var<'t>, lambda: f64, active: &[bool]) -> Result<Var<'t>> {
        self.check_tape(mix, "blend")?;
        let (a, b) = (self.value(), mix.value());
        same_shape("blend", &a, &b)?;
        if active.len() != a.rows() {
            return shape_err(
                "blend",
                format!("{} rows, {} flags", a.rows(), active.len()),
            );
        }
        let w = a.row_len().max(1);
        let mut data = a.data().to_vec();
        let rows = data
            .chunks_exact_mut(w)
            .zip(a.data().chunks_exact(w))
            .zip(b.data().chunks_exact(w));
        for (((out, ra), rb), &on) in rows.zip(active) {
            if on {
                for ((o, x), y) in out.iter_mut().zip(ra).zip(rb) {
                    *o = lambda * x + (1.0 - lambda) * y;
                }
            }
        }
        let out = Tensor::new(a.shape().to_vec(), data)?;
        let op = Op::Blend {
            keep: self.id,
            mix: mix.id,
            lambda,
            active: active.to_vec(),
        };
        self.tape.record(out, op, &[self.id, mix.id])
    }

    /// Same value, cut from the backward pass.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant((*self.value()).clone())
    }
}
