//! Reverse-mode differentiation over a linear operation record.
//!
//! Every primitive appends one node holding its forward value. Nodes are
//! appended in execution order, so the record is already topologically sorted
//! and the backward sweep simply walks it in reverse.

use crate::error::{GradError, Result};
use crate::fft;
use crate::kernels::{self, split_axis};
use crate::tensor::{broadcast_shape, broadcast_strides, for_each_broadcast, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum Unary {
    Neg,
    Scale(f64),
    Offset(f64),
    Powf(f64),
    Exp,
    Log,
    Sqrt,
    Sigmoid,
    Softplus,
    Tanh,
    Relu,
    Gelu,
    Sin,
    Cos,
    Abs,
    ClampMin(f64),
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Unary(Unary, Var),
    Binary(Binary, Var, Var),
    Atan2(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, rstd: Vec<f64> },
    Sum(Var),
    SumAxis { x: Var, axis: usize, scale: f64 },
    Slice { x: Var, axis: usize, start: usize },
    Concat { xs: Vec<Var>, axis: usize },
    Reshape(Var),
    Interp(Var),
    Frame { x: Var, hop: usize },
    OverlapAdd { x: Var, hop: usize },
    Rfft(Var),
    Irfft(Var),
    Norm(Var),
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// Ordered record of executed primitives.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    backward_done: bool,
}

/// Gradients of a scalar root with respect to every `requires_grad` leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a leaf; `None` only for leaves that do not require grad.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Clears the record so the tape can be reused for a fresh forward pass.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.backward_done = false;
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self
            .nodes
            .get(v.0)
            .unwrap_or_else(|| panic!("{v:?} does not belong to this tape"))
            .value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(GradError::contract("backward on an empty tape"));
        }
        if self.backward_done {
            return Err(GradError::contract(
                "backward already ran on this recording; reset the tape first",
            ));
        }
        if root.0 >= self.nodes.len() {
            return Err(GradError::contract(format!("{root:?} does not belong to this tape")));
        }
        if self.nodes[root.0].value.len() != 1 {
            return Err(GradError::contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        self.backward_done = true;

        let n = root.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);
        let mut leaves: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaves[i] = Some(Tensor::from_parts(node.value.shape().to_vec(), g));
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && leaves[i].is_none() {
                leaves[i] = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(Gradients { grads: leaves })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Unary(kind, x) => {
                if !self.requires_grad(*x) {
                    return;
                }
                let xv = self.value(*x).data();
                let gx = acc(grads, *x, xv.len());
                unary_backward(*kind, xv, y, g, gx);
            }
            Op::Binary(kind, a, b) => self.binary_backward(*kind, *a, *b, y, g, grads),
            Op::Atan2(yv, xv) => {
                let (ys, xs) = (self.value(*yv).data(), self.value(*xv).data());
                let denom: Vec<f64> = ys.iter().zip(xs).map(|(a, b)| a * a + b * b).collect();
                if self.requires_grad(*yv) {
                    let gy = acc(grads, *yv, ys.len());
                    for k in 0..g.len() {
                        if denom[k] > 0.0 {
                            gy[k] += g[k] * xs[k] / denom[k];
                        }
                    }
                }
                if self.requires_grad(*xv) {
                    let gx = acc(grads, *xv, xs.len());
                    for k in 0..g.len() {
                        if denom[k] > 0.0 {
                            gx[k] -= g[k] * ys[k] / denom[k];
                        }
                    }
                }
            }
            Op::MatMul(a, b) => self.matmul_backward(*a, *b, g, grads),
            Op::Transpose(x) => {
                if self.requires_grad(*x) {
                    let gx = acc(grads, *x, g.len());
                    transpose_last2(g, node.value.shape(), gx);
                }
            }
            Op::Softmax { x, axis } => {
                if !self.requires_grad(*x) {
                    return;
                }
                let (outer, dim, inner) = split_axis(node.value.shape(), *axis);
                let gx = acc(grads, *x, y.len());
                for o in 0..outer {
                    for j in 0..inner {
                        let base = o * dim * inner + j;
                        let dot: f64 =
                            (0..dim).map(|d| g[base + d * inner] * y[base + d * inner]).sum();
                        for d in 0..dim {
                            let idx = base + d * inner;
                            gx[idx] += y[idx] * (g[idx] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, rstd } => {
                if !self.requires_grad(*x) {
                    return;
                }
                let dim = *node.value.shape().last().unwrap();
                let gx = acc(grads, *x, y.len());
                for (r, &s) in rstd.iter().enumerate() {
                    let gr = &g[r * dim..(r + 1) * dim];
                    let yr = &y[r * dim..(r + 1) * dim];
                    let mean_g = gr.iter().sum::<f64>() / dim as f64;
                    let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / dim as f64;
                    for d in 0..dim {
                        gx[r * dim + d] += s * (gr[d] - mean_g - yr[d] * mean_gy);
                    }
                }
            }
            Op::Sum(x) => {
                if self.requires_grad(*x) {
                    let n = self.value(*x).len();
                    let gx = acc(grads, *x, n);
                    gx.iter_mut().for_each(|v| *v += g[0]);
                }
            }
            Op::SumAxis { x, axis, scale } => {
                if !self.requires_grad(*x) {
                    return;
                }
                let (outer, dim, inner) = split_axis(self.shape(*x), *axis);
                let gx = acc(grads, *x, outer * dim * inner);
                for o in 0..outer {
                    for d in 0..dim {
                        for j in 0..inner {
                            gx[(o * dim + d) * inner + j] += scale * g[o * inner + j];
                        }
                    }
                }
            }
            Op::Slice { x, axis, start } => {
                if !self.requires_grad(*x) {
                    return;
                }
                let (outer, dim, inner) = split_axis(self.shape(*x), *axis);
                let len = node.value.shape()[*axis];
                let gx = acc(grads, *x, outer * dim * inner);
                for o in 0..outer {
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    let dst = &mut gx[(o * dim + start) * inner..(o * dim + start + len) * inner];
                    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                }
            }
            Op::Concat { xs, axis } => {
                let out_shape = node.value.shape();
                let (outer, total, inner) = split_axis(out_shape, *axis);
                let mut offset = 0;
                for x in xs {
                    let len = self.shape(*x)[*axis];
                    if self.requires_grad(*x) {
                        let gx = acc(grads, *x, outer * len * inner);
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            let dst = &mut gx[o * len * inner..(o + 1) * len * inner];
                            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                        }
                    }
                    offset += len;
                }
            }
            Op::Reshape(x) => {
                if self.requires_grad(*x) {
                    let gx = acc(grads, *x, g.len());
                    gx.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
            }
            Op::Interp(x) => {
                if !self.requires_grad(*x) {
                    return;
                }
                let width = *self.shape(*x).last().unwrap();
                let out_len = *node.value.shape().last().unwrap();
                let table = kernels::interp_table(width, out_len);
                let rows = g.len() / out_len;
                let gx = acc(grads, *x, rows * width);
                for r in 0..rows {
                    let gr = &g[r * out_len..(r + 1) * out_len];
                    let dst = &mut gx[r * width..(r + 1) * width];
                    for (j, &(lo, frac)) in table.iter().enumerate() {
                        dst[lo] += gr[j] * (1.0 - frac);
                        if frac != 0.0 {
                            dst[lo + 1] += gr[j] * frac;
                        }
                    }
                }
            }
            Op::Frame { x, hop } => {
                if !self.requires_grad(*x) {
                    return;
                }
                let t = *self.shape(*x).last().unwrap();
                let s = node.value.shape();
                let (frames, len) = (s[s.len() - 2], s[s.len() - 1]);
                let rows = self.value(*x).len() / t;
                let gx = acc(grads, *x, rows * t);
                for r in 0..rows {
                    for f in 0..frames {
                        let src = &g[(r * frames + f) * len..(r * frames + f + 1) * len];
                        let dst = &mut gx[r * t + f * hop..r * t + f * hop + len];
                        dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::OverlapAdd { x, hop } => {
                if !self.requires_grad(*x) {
                    return;
                }
                let s = self.shape(*x);
                let (frames, len) = (s[s.len() - 2], s[s.len() - 1]);
                let t = *node.value.shape().last().unwrap();
                let rows = g.len() / t;
                let gx = acc(grads, *x, rows * frames * len);
                for r in 0..rows {
                    for f in 0..frames {
                        let src = &g[r * t + f * hop..r * t + f * hop + len];
                        let dst = &mut gx[(r * frames + f) * len..(r * frames + f + 1) * len];
                        dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::Rfft(x) => {
                if self.requires_grad(*x) {
                    let n = *self.shape(*x).last().unwrap();
                    let back = fft::rfft_adjoint_rows(g, n);
                    let gx = acc(grads, *x, back.len());
                    gx.iter_mut().zip(&back).for_each(|(d, s)| *d += s);
                }
            }
            Op::Irfft(x) => {
                if self.requires_grad(*x) {
                    let n = *node.value.shape().last().unwrap();
                    let back = fft::irfft_adjoint_rows(g, n);
                    let gx = acc(grads, *x, back.len());
                    gx.iter_mut().zip(&back).for_each(|(d, s)| *d += s);
                }
            }
            Op::Norm(x) => {
                if self.requires_grad(*x) {
                    let xv = self.value(*x).data();
                    let norm = y[0];
                    let gx = acc(grads, *x, xv.len());
                    if norm > 0.0 {
                        let s = g[0] / norm;
                        gx.iter_mut().zip(xv).for_each(|(d, v)| *d += s * v);
                    }
                }
            }
        }
    }

    fn binary_backward(
        &self,
        kind: Binary,
        a: Var,
        b: Var,
        y: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (av, bv) = (self.value(a), self.value(b));
        let out_shape = broadcast_shape("backward", av.shape(), bv.shape()).expect("checked in forward");
        let sa = broadcast_strides(av.shape(), &out_shape);
        let sb = broadcast_strides(bv.shape(), &out_shape);
        let (ad, bd) = (av.data(), bv.data());
        if self.requires_grad(a) {
            let ga = acc(grads, a, ad.len());
            match kind {
                Binary::Add | Binary::Sub => {
                    for_each_broadcast(&out_shape, &sa, &sb, |ia, _, o| ga[ia] += g[o])
                }
                Binary::Mul => {
                    for_each_broadcast(&out_shape, &sa, &sb, |ia, ib, o| ga[ia] += g[o] * bd[ib])
                }
                Binary::Div => {
                    for_each_broadcast(&out_shape, &sa, &sb, |ia, ib, o| ga[ia] += g[o] / bd[ib])
                }
            }
        }
        if self.requires_grad(b) {
            let gb = acc(grads, b, bd.len());
            match kind {
                Binary::Add => for_each_broadcast(&out_shape, &sa, &sb, |_, ib, o| gb[ib] += g[o]),
                Binary::Sub => for_each_broadcast(&out_shape, &sa, &sb, |_, ib, o| gb[ib] -= g[o]),
                Binary::Mul => {
                    for_each_broadcast(&out_shape, &sa, &sb, |ia, ib, o| gb[ib] += g[o] * ad[ia])
                }
                Binary::Div => for_each_broadcast(&out_shape, &sa, &sb, |_, ib, o| {
                    gb[ib] -= g[o] * y[o] / bd[ib]
                }),
            }
        }
    }

    fn matmul_backward(&self, a: Var, b: Var, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (av, bv) = (self.value(a), self.value(b));
        let dims = MatmulDims::new(av.shape(), bv.shape()).expect("checked in forward");
        let (m, k, n) = (dims.m, dims.k, dims.n);
        if self.requires_grad(a) {
            let ga = acc(grads, a, av.len());
            for bi in 0..dims.batch {
                let ao = if dims.a_batched { bi * m * k } else { 0 };
                let bo = if dims.b_batched { bi * k * n } else { 0 };
                kernels::matmul_grad_lhs(
                    &g[bi * m * n..(bi + 1) * m * n],
                    &bv.data()[bo..bo + k * n],
                    &mut ga[ao..ao + m * k],
                    m,
                    k,
                    n,
                );
            }
        }
        if self.requires_grad(b) {
            let gb = acc(grads, b, bv.len());
            for bi in 0..dims.batch {
                let ao = if dims.a_batched { bi * m * k } else { 0 };
                let bo = if dims.b_batched { bi * k * n } else { 0 };
                kernels::matmul_grad_rhs(
                    &av.data()[ao..ao + m * k],
                    &g[bi * m * n..(bi + 1) * m * n],
                    &mut gb[bo..bo + k * n],
                    m,
                    k,
                    n,
                );
            }
        }
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn unary_backward(kind: Unary, x: &[f64], y: &[f64], g: &[f64], gx: &mut [f64]) {
    for i in 0..g.len() {
        let d = match kind {
            Unary::Neg => -1.0,
            Unary::Scale(s) => s,
            Unary::Offset(_) => 1.0,
            Unary::Powf(p) => {
                if p == 0.0 {
                    0.0
                } else {
                    p * x[i].powf(p - 1.0)
                }
            }
            Unary::Exp => y[i],
            Unary::Log => 1.0 / x[i],
            Unary::Sqrt => {
                if y[i] > 0.0 {
                    0.5 / y[i]
                } else {
                    0.0
                }
            }
            Unary::Sigmoid => y[i] * (1.0 - y[i]),
            Unary::Softplus => kernels::sigmoid(x[i]),
            Unary::Tanh => 1.0 - y[i] * y[i],
            Unary::Relu => {
                if x[i] > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Gelu => kernels::gelu_grad(x[i]),
            Unary::Sin => x[i].cos(),
            Unary::Cos => -x[i].sin(),
            Unary::Abs => {
                if x[i] > 0.0 {
                    1.0
                } else if x[i] < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Unary::ClampMin(lo) => {
                if x[i] >= lo {
                    1.0
                } else {
                    0.0
                }
            }
        };
        gx[i] += g[i] * d;
    }
}

/// Writes the transpose of the last two axes of `g` (shape `shape`) into `out`.
pub(crate) fn transpose_last2(g: &[f64], shape: &[usize], out: &mut [f64]) {
    let r = shape.len();
    let (rows, cols) = (shape[r - 2], shape[r - 1]);
    let batch = g.len() / (rows * cols);
    for b in 0..batch {
        let base = b * rows * cols;
        for i in 0..rows {
            for j in 0..cols {
                out[base + j * rows + i] += g[base + i * cols + j];
            }
        }
    }
}

pub(crate) struct MatmulDims {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub a_batched: bool,
    pub b_batched: bool,
    pub out_shape: Vec<usize>,
}

impl MatmulDims {
    /// Supports `[.., m, k] x [.., k, n]` where batch dims match, or either
    /// operand is a plain matrix shared across the other's batch.
    pub fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        let err = || GradError::ShapeMismatch { op: "matmul", lhs: a.to_vec(), rhs: b.to_vec() };
        if a.len() < 2 || b.len() < 2 {
            return Err(err());
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
        if k != k2 {
            return Err(err());
        }
        let (ab, bb) = (&a[..a.len() - 2], &b[..b.len() - 2]);
        let batch_shape = match (ab.is_empty(), bb.is_empty()) {
            (true, true) => Vec::new(),
            (false, true) => ab.to_vec(),
            (true, false) => bb.to_vec(),
            (false, false) if ab == bb => ab.to_vec(),
            _ => return Err(err()),
        };
        let mut out_shape = batch_shape.clone();
        out_shape.extend([m, n]);
        Ok(Self {
            batch: batch_shape.iter().product(),
            m,
            k,
            n,
            a_batched: !ab.is_empty(),
            b_batched: !bb.is_empty(),
            out_shape,
        })
    }
}
