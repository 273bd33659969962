//! Forward implementations of every primitive.

use crate::error::{GradError, Result};
use crate::fft;
use crate::kernels::{self, split_axis};
use crate::tape::{transpose_last2, Binary, MatmulDims, Op, Tape, Unary, Var};
use crate::tensor::{broadcast_shape, broadcast_strides, for_each_broadcast, Tensor};

const LAYERNORM_EPS: f64 = 1e-5;

impl Tape {
    fn unary(&mut self, kind: Unary, x: Var) -> Var {
        let xv = self.value(x);
        let f: fn(f64, Unary) -> f64 = |v, k| match k {
            Unary::Neg => -v,
            Unary::Scale(s) => v * s,
            Unary::Offset(c) => v + c,
            Unary::Powf(p) => v.powf(p),
            Unary::Exp => v.exp(),
            Unary::Log => v.ln(),
            Unary::Sqrt => v.sqrt(),
            Unary::Sigmoid => kernels::sigmoid(v),
            Unary::Softplus => kernels::softplus(v),
            Unary::Tanh => v.tanh(),
            Unary::Relu => v.max(0.0),
            Unary::Gelu => kernels::gelu(v),
            Unary::Sin => v.sin(),
            Unary::Cos => v.cos(),
            Unary::Abs => v.abs(),
            Unary::ClampMin(lo) => v.max(lo),
        };
        let value = xv.map(|v| f(v, kind));
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Unary(kind, x), rg)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(Unary::Neg, x)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(Unary::Scale(s), x)
    }

    pub fn offset(&mut self, x: Var, c: f64) -> Var {
        self.unary(Unary::Offset(c), x)
    }

    /// Elementwise `x^p`. Negative bases are rejected unless `p` is an integer.
    pub fn powf(&mut self, x: Var, p: f64) -> Result<Var> {
        if p.fract() != 0.0 {
            if let Some(bad) = self.value(x).data().iter().find(|&&v| v < 0.0) {
                return Err(GradError::domain("powf", format!("negative base {bad} with p={p}")));
            }
        }
        if p < 1.0 && p != 0.0 {
            if self.value(x).data().iter().any(|&v| v == 0.0) {
                return Err(GradError::domain("powf", format!("zero base with p={p}")));
            }
        }
        Ok(self.unary(Unary::Powf(p), x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(Unary::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data().iter().find(|&&v| !(v > 0.0)) {
            return Err(GradError::domain("log", format!("non-positive input {bad}")));
        }
        Ok(self.unary(Unary::Log, x))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data().iter().find(|&&v| !(v >= 0.0)) {
            return Err(GradError::domain("sqrt", format!("negative input {bad}")));
        }
        Ok(self.unary(Unary::Sqrt, x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(Unary::Softplus, x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(Unary::Tanh, x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Unary::Relu, x)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(Unary::Gelu, x)
    }

    pub fn sin(&mut self, x: Var) -> Var {
        self.unary(Unary::Sin, x)
    }

    pub fn cos(&mut self, x: Var) -> Var {
        self.unary(Unary::Cos, x)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(Unary::Abs, x)
    }

    pub fn clamp_min(&mut self, x: Var, lo: f64) -> Var {
        self.unary(Unary::ClampMin(lo), x)
    }

    fn binary(&mut self, kind: Binary, op: &'static str, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let out_shape = broadcast_shape(op, av.shape(), bv.shape())?;
        let sa = broadcast_strides(av.shape(), &out_shape);
        let sb = broadcast_strides(bv.shape(), &out_shape);
        let (ad, bd) = (av.data(), bv.data());
        if let Binary::Div = kind {
            if let Some(pos) = bd.iter().position(|&v| v == 0.0) {
                return Err(GradError::domain("div", format!("zero divisor at index {pos}")));
            }
        }
        let mut out = vec![0.0; out_shape.iter().product()];
        match kind {
            Binary::Add => for_each_broadcast(&out_shape, &sa, &sb, |i, j, o| out[o] = ad[i] + bd[j]),
            Binary::Sub => for_each_broadcast(&out_shape, &sa, &sb, |i, j, o| out[o] = ad[i] - bd[j]),
            Binary::Mul => for_each_broadcast(&out_shape, &sa, &sb, |i, j, o| out[o] = ad[i] * bd[j]),
            Binary::Div => for_each_broadcast(&out_shape, &sa, &sb, |i, j, o| out[o] = ad[i] / bd[j]),
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::Binary(kind, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, "add", a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, "sub", a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, "mul", a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, "div", a, b)
    }

    /// Elementwise four-quadrant arctangent of `y / x`; gradient is zero at the origin.
    pub fn atan2(&mut self, y: Var, x: Var) -> Result<Var> {
        let (yv, xv) = (self.value(y), self.value(x));
        if yv.shape() != xv.shape() {
            return Err(GradError::ShapeMismatch {
                op: "atan2",
                lhs: yv.shape().to_vec(),
                rhs: xv.shape().to_vec(),
            });
        }
        let data = yv.data().iter().zip(xv.data()).map(|(a, b)| a.atan2(*b)).collect();
        let value = Tensor::from_parts(yv.shape().to_vec(), data);
        let rg = self.any_grad(&[y, x]);
        Ok(self.push(value, Op::Atan2(y, x), rg))
    }

    /// Matrix product over the last two axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let dims = MatmulDims::new(av.shape(), bv.shape())?;
        let (m, k, n) = (dims.m, dims.k, dims.n);
        let mut out = vec![0.0; dims.batch * m * n];
        for bi in 0..dims.batch {
            let ao = if dims.a_batched { bi * m * k } else { 0 };
            let bo = if dims.b_batched { bi * k * n } else { 0 };
            kernels::matmul_acc(
                &av.data()[ao..ao + m * k],
                &bv.data()[bo..bo + k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::from_parts(dims.out_shape, out), Op::MatMul(a, b), rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let r = xv.rank();
        if r < 2 {
            return Err(GradError::contract(format!("transpose needs rank >= 2, got {:?}", xv.shape())));
        }
        let mut shape = xv.shape().to_vec();
        shape.swap(r - 2, r - 1);
        let mut out = vec![0.0; xv.len()];
        transpose_last2(xv.data(), xv.shape(), &mut out);
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Transpose(x), rg))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        check_axis("softmax", xv.shape(), axis)?;
        let (outer, dim, inner) = split_axis(xv.shape(), axis);
        let d = xv.data();
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for j in 0..inner {
                let base = o * dim * inner + j;
                let max = (0..dim).map(|i| d[base + i * inner]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for i in 0..dim {
                    let e = (d[base + i * inner] - max).exp();
                    out[base + i * inner] = e;
                    total += e;
                }
                for i in 0..dim {
                    out[base + i * inner] /= total;
                }
            }
        }
        let value = Tensor::from_parts(xv.shape().to_vec(), out);
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Softmax { x, axis }, rg))
    }

    /// Normalizes over the last axis to zero mean and unit variance (no affine part).
    pub fn layernorm(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() == 0 {
            return Err(GradError::contract("layernorm on a scalar"));
        }
        let dim = *xv.shape().last().unwrap();
        let rows = xv.len() / dim;
        let d = xv.data();
        let mut out = vec![0.0; d.len()];
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &d[r * dim..(r + 1) * dim];
            let mean = row.iter().sum::<f64>() / dim as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
            let s = 1.0 / (var + LAYERNORM_EPS).sqrt();
            for (o, v) in out[r * dim..(r + 1) * dim].iter_mut().zip(row) {
                *o = (v - mean) * s;
            }
            rstd.push(s);
        }
        let value = Tensor::from_parts(xv.shape().to_vec(), out);
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::LayerNorm { x, rstd }, rg))
    }

    /// Sum of every element, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sum over `axis`, keeping it with extent 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, 1.0)
    }

    /// Mean over `axis`, keeping it with extent 1.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let dim = self.value(x).shape().get(axis).copied().unwrap_or(1);
        self.reduce_axis(x, axis, 1.0 / dim as f64)
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, scale: f64) -> Result<Var> {
        let xv = self.value(x);
        check_axis("sum_axis", xv.shape(), axis)?;
        let (outer, dim, inner) = split_axis(xv.shape(), axis);
        let d = xv.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..dim {
                let src = &d[(o * dim + i) * inner..(o * dim + i + 1) * inner];
                for (dst, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *dst += s;
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= scale);
        let mut shape = xv.shape().to_vec();
        shape[axis] = 1;
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::SumAxis { x, axis, scale }, rg))
    }

    /// Contiguous range `start..start + len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        check_axis("slice", xv.shape(), axis)?;
        let (outer, dim, inner) = split_axis(xv.shape(), axis);
        if len == 0 || start + len > dim {
            return Err(GradError::contract(format!(
                "slice {start}..{} out of range for axis {axis} of {:?}",
                start + len,
                xv.shape()
            )));
        }
        let d = xv.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&d[(o * dim + start) * inner..(o * dim + start + len) * inner]);
        }
        let mut shape = xv.shape().to_vec();
        shape[axis] = len;
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Slice { x, axis, start }, rg))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| GradError::contract("concat of nothing"))?;
        let base = self.value(*first).shape().to_vec();
        check_axis("concat", &base, axis)?;
        let mut total = 0;
        for x in xs {
            let s = self.value(*x).shape();
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(GradError::ShapeMismatch { op: "concat", lhs: base, rhs: s.to_vec() });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for x in xs {
                let v = self.value(*x);
                let len = v.shape()[axis];
                out.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.any_grad(xs);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Concat { xs: xs.to_vec(), axis }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Linear interpolation of the last axis to `out_len` points, aligned at both ends.
    pub fn interp(&mut self, x: Var, out_len: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() == 0 || out_len == 0 {
            return Err(GradError::contract("interp needs a non-scalar input and out_len > 0"));
        }
        let width = *xv.shape().last().unwrap();
        let table = kernels::interp_table(width, out_len);
        let rows = xv.len() / width;
        let d = xv.data();
        let mut out = vec![0.0; rows * out_len];
        for r in 0..rows {
            let src = &d[r * width..(r + 1) * width];
            for (j, &(lo, frac)) in table.iter().enumerate() {
                let hi = if frac != 0.0 { src[lo + 1] } else { 0.0 };
                out[r * out_len + j] = src[lo] * (1.0 - frac) + hi * frac;
            }
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = out_len;
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Interp(x), rg))
    }

    /// Cuts the last axis (length `T`) into frames of `len` taken every `hop`
    /// samples: `[.., T] -> [.., n_frames, len]`. Trailing samples that do not
    /// fill a frame are dropped.
    pub fn frame(&mut self, x: Var, len: usize, hop: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() == 0 || len == 0 || hop == 0 {
            return Err(GradError::contract("frame needs a non-scalar input, len > 0 and hop > 0"));
        }
        let t = *xv.shape().last().unwrap();
        if t < len {
            return Err(GradError::contract(format!("signal of {t} samples shorter than frame {len}")));
        }
        let frames = (t - len) / hop + 1;
        let rows = xv.len() / t;
        let d = xv.data();
        let mut out = Vec::with_capacity(rows * frames * len);
        for r in 0..rows {
            for f in 0..frames {
                out.extend_from_slice(&d[r * t + f * hop..r * t + f * hop + len]);
            }
        }
        let mut shape = xv.shape()[..xv.rank() - 1].to_vec();
        shape.extend([frames, len]);
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Frame { x, hop }, rg))
    }

    /// Sums frames `[.., n_frames, len]` placed every `hop` samples into
    /// `[.., (n_frames - 1) * hop + len]`. Adjoint of [`Tape::frame`].
    pub fn overlap_add(&mut self, x: Var, hop: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() < 2 || hop == 0 {
            return Err(GradError::contract("overlap_add needs rank >= 2 and hop > 0"));
        }
        let s = xv.shape();
        let (frames, len) = (s[s.len() - 2], s[s.len() - 1]);
        let t = (frames - 1) * hop + len;
        let rows = xv.len() / (frames * len);
        let d = xv.data();
        let mut out = vec![0.0; rows * t];
        for r in 0..rows {
            for f in 0..frames {
                let src = &d[(r * frames + f) * len..(r * frames + f + 1) * len];
                for (o, v) in out[r * t + f * hop..r * t + f * hop + len].iter_mut().zip(src) {
                    *o += v;
                }
            }
        }
        let mut shape = s[..s.len() - 2].to_vec();
        shape.push(t);
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::OverlapAdd { x, hop }, rg))
    }

    /// Real DFT of the last axis (length `n`), giving `[re | im]` halves of
    /// `n / 2 + 1` bins each.
    pub fn rfft(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() == 0 {
            return Err(GradError::contract("rfft on a scalar"));
        }
        let n = *xv.shape().last().unwrap();
        let out = fft::rfft_rows(xv.data(), n);
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = 2 * fft::half_len(n);
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Rfft(x), rg))
    }

    /// Inverse of [`Tape::rfft`] producing `n` real samples per row.
    pub fn irfft(&mut self, x: Var, n: usize) -> Result<Var> {
        let xv = self.value(x);
        let f = fft::half_len(n);
        if xv.rank() == 0 || *xv.shape().last().unwrap() != 2 * f {
            return Err(GradError::contract(format!(
                "irfft to {n} samples needs last axis {}, got {:?}",
                2 * f,
                xv.shape()
            )));
        }
        let out = fft::irfft_rows(xv.data(), n);
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Irfft(x), rg))
    }

    /// Euclidean norm of all elements. The gradient at the origin is taken as zero.
    pub fn norm(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).norm());
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Norm(x), rg)
    }
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(GradError::contract(format!("{op}: axis {axis} out of range for {shape:?}")));
    }
    Ok(())
}
