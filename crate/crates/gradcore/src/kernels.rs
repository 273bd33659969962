//! Plain loops shared by forward and backward passes.

/// `c[m x n] += a[m x k] * b[k x n]`
pub fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

/// `da[m x k] += g[m x n] * b[k x n]^T`
pub fn matmul_grad_lhs(g: &[f64], b: &[f64], da: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            da[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `db[k x n] += a[m x k]^T * g[m x n]`
pub fn matmul_grad_rhs(a: &[f64], g: &[f64], db: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let drow = &mut db[p * n..(p + 1) * n];
            for (d, &gv) in drow.iter_mut().zip(grow) {
                *d += aip * gv;
            }
        }
    }
}

/// Splits `shape` around `axis` into `(outer, dim, inner)` extents.
pub fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Align-corners linear interpolation table: output position `j` reads
/// `(lo, frac)` so that `y[j] = x[lo] (1 - frac) + x[lo + 1] frac`.
pub fn interp_table(width: usize, out_len: usize) -> Vec<(usize, f64)> {
    if width == 1 {
        return vec![(0, 0.0); out_len];
    }
    (0..out_len)
        .map(|j| {
            let pos = if out_len == 1 {
                0.0
            } else {
                j as f64 * (width - 1) as f64 / (out_len - 1) as f64
            };
            let lo = (pos.floor() as usize).min(width - 2);
            (lo, pos - lo as f64)
        })
        .collect()
}
