//! Real-input DFT helpers over the last axis of row-major buffers, plus the
//! exact adjoints the tape needs.
//!
//! Half spectra are stored as `[re_0 .. re_{F-1} | im_0 .. im_{F-1}]` with
//! `F = n / 2 + 1`.

use std::cell::RefCell;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(n: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(n)
        } else {
            p.plan_fft_forward(n)
        }
    })
}

pub fn half_len(n: usize) -> usize {
    n / 2 + 1
}

/// Forward DFT `X[k] = sum_m x[m] e^{-2 pi i k m / n}` for each row, keeping
/// bins `0..=n/2`. Rows are transformed in pairs packed as real and
/// imaginary parts of one complex sequence.
pub fn rfft_rows(data: &[f64], n: usize) -> Vec<f64> {
    let f = half_len(n);
    let rows = data.len() / n;
    let fft = plan(n, false);
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut out = vec![0.0; rows * 2 * f];
    let mut r = 0;
    while r < rows {
        let a = &data[r * n..(r + 1) * n];
        if r + 1 < rows {
            let b = &data[(r + 1) * n..(r + 2) * n];
            for ((z, &x), &y) in buf.iter_mut().zip(a).zip(b) {
                *z = Complex::new(x, y);
            }
            fft.process_with_scratch(&mut buf, &mut scratch);
            let (oa, ob) = out[r * 2 * f..(r + 2) * 2 * f].split_at_mut(2 * f);
            for k in 0..f {
                let zk = buf[k];
                let zn = buf[(n - k) % n].conj();
                let (s, d) = (zk + zn, zk - zn);
                oa[k] = 0.5 * s.re;
                oa[f + k] = 0.5 * s.im;
                ob[k] = 0.5 * d.im;
                ob[f + k] = -0.5 * d.re;
            }
            r += 2;
        } else {
            for (z, &x) in buf.iter_mut().zip(a) {
                *z = Complex::new(x, 0.0);
            }
            fft.process_with_scratch(&mut buf, &mut scratch);
            let o = &mut out[r * 2 * f..(r + 1) * 2 * f];
            for k in 0..f {
                o[k] = buf[k].re;
                o[f + k] = buf[k].im;
            }
            r += 1;
        }
    }
    out
}

/// Writes the Hermitian extension of half spectrum `s` into `buf`, ignoring
/// the imaginary parts of self-conjugate bins.
fn hermitian(s: &[f64], n: usize, buf: &mut [Complex<f64>]) {
    let f = half_len(n);
    buf[0] = Complex::new(s[0], 0.0);
    for k in 1..f {
        buf[k] = Complex::new(s[k], s[f + k]);
    }
    if n % 2 == 0 {
        buf[n / 2] = Complex::new(s[n / 2], 0.0);
    }
    for k in 1..n.div_ceil(2) {
        buf[n - k] = buf[k].conj();
    }
}

/// Inverse of [`rfft_rows`]: Hermitian extension of the half spectrum, then
/// `x[m] = (1/n) sum_k X[k] e^{2 pi i k m / n}`. Imaginary parts of the DC
/// (and, for even `n`, Nyquist) bins are ignored.
pub fn irfft_rows(spec: &[f64], n: usize) -> Vec<f64> {
    let f = half_len(n);
    let rows = spec.len() / (2 * f);
    let fft = plan(n, true);
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    let mut other = vec![Complex::new(0.0, 0.0); n];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut out = vec![0.0; rows * n];
    let scale = 1.0 / n as f64;
    let mut r = 0;
    while r < rows {
        hermitian(&spec[r * 2 * f..(r + 1) * 2 * f], n, &mut buf);
        if r + 1 < rows {
            // Both outputs are real, so the second rides on the imaginary part.
            hermitian(&spec[(r + 1) * 2 * f..(r + 2) * 2 * f], n, &mut other);
            for (z, o) in buf.iter_mut().zip(&other) {
                *z += Complex::new(-o.im, o.re);
            }
            fft.process_with_scratch(&mut buf, &mut scratch);
            let (oa, ob) = out[r * n..(r + 2) * n].split_at_mut(n);
            for ((a, b), z) in oa.iter_mut().zip(ob.iter_mut()).zip(&buf) {
                *a = z.re * scale;
                *b = z.im * scale;
            }
            r += 2;
        } else {
            fft.process_with_scratch(&mut buf, &mut scratch);
            for (o, z) in out[r * n..(r + 1) * n].iter_mut().zip(&buf) {
                *o = z.re * scale;
            }
            r += 1;
        }
    }
    out
}

/// Adjoint of [`rfft_rows`]: `x_bar[m] = Re(sum_{k<F} G[k] e^{+2 pi i k m / n})`.
///
/// Equal to `n * irfft` of `G` with every non-self-conjugate bin halved.
pub fn rfft_adjoint_rows(grad: &[f64], n: usize) -> Vec<f64> {
    let f = half_len(n);
    let mut g = grad.to_vec();
    for row in g.chunks_exact_mut(2 * f) {
        for k in 0..f {
            if !(k == 0 || (n % 2 == 0 && k == n / 2)) {
                row[k] *= 0.5;
                row[f + k] *= 0.5;
            }
        }
    }
    let mut out = irfft_rows(&g, n);
    out.iter_mut().for_each(|v| *v *= n as f64);
    out
}

/// Adjoint of [`irfft_rows`]: `(c_k / n) * rfft(x_bar)[k]`, where `c_k` is 1
/// on self-conjugate bins (whose imaginary input is discarded) and 2 elsewhere.
pub fn irfft_adjoint_rows(grad: &[f64], n: usize) -> Vec<f64> {
    let f = half_len(n);
    let mut spec = rfft_rows(grad, n);
    let rows = spec.len() / (2 * f);
    let inv = 1.0 / n as f64;
    for r in 0..rows {
        let s = &mut spec[r * 2 * f..(r + 1) * 2 * f];
        for k in 0..f {
            let self_conjugate = k == 0 || (n % 2 == 0 && k == n / 2);
            let c = if self_conjugate { inv } else { 2.0 * inv };
            s[k] *= c;
            s[f + k] = if self_conjugate { 0.0 } else { s[f + k] * c };
        }
    }
    spec
}
