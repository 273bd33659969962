//! Central finite-difference gradient verification.

use crate::error::{GradError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Result of a gradient check, with the worst entry located.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Worst relative error per leaf, in input order.
    pub per_leaf: Vec<f64>,
    /// `(leaf, flat index)` of the worst entry.
    pub worst: (usize, usize),
    /// Per leaf, the largest absolute error divided by the largest derivative
    /// magnitude in that leaf.
    pub per_leaf_scaled: Vec<f64>,
    /// Analytic and numeric derivative at the worst entry.
    pub worst_values: (f64, f64),
    pub entries_checked: usize,
}

/// Which entries of each leaf to perturb.
#[derive(Clone, Copy, Debug)]
pub enum Coverage {
    All,
    /// At most this many entries per leaf, evenly strided.
    Strided(usize),
}

/// Compares tape gradients of the scalar function `f` against central
/// differences with step `eps` and returns the maximum relative error
/// `|a - n| / max(|a|, |n|, 1e-12)` over every leaf entry.
pub fn grad_check<F>(f: F, leaves: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    Ok(grad_check_report(f, leaves, eps, Coverage::All)?.max_rel_error)
}

pub fn grad_check_report<F>(
    f: F,
    leaves: &[Tensor],
    eps: f64,
    coverage: Coverage,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(GradError::contract(format!("epsilon {eps} outside [1e-7, 1e-3]")));
    }
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        let root = f(&mut tape, &vars)?;
        tape.value(root).item()
    };

    let first = eval(leaves)?;
    let second = eval(leaves)?;
    if first.to_bits() != second.to_bits() {
        return Err(GradError::NonDeterministic { first, second });
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.param(t.clone())).collect();
    let root = f(&mut tape, &vars)?;
    let grads = tape.backward(root)?;

    let mut work: Vec<Tensor> = leaves.to_vec();
    let mut per_leaf = vec![0.0f64; leaves.len()];
    let mut per_leaf_scaled = vec![0.0f64; leaves.len()];
    let mut worst = (0, 0);
    let mut worst_values = (0.0, 0.0);
    let mut max_rel = 0.0f64;
    let mut checked = 0;
    for (li, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("params always receive a gradient").data().to_vec();
        let n = analytic.len();
        let stride = match coverage {
            Coverage::All => 1,
            Coverage::Strided(k) => n.div_ceil(k.max(1)).max(1),
        };
        let (mut abs_err, mut scale) = (0.0f64, 1e-12f64);
        for idx in (0..n).step_by(stride) {
            let orig = work[li].data()[idx];
            work[li].data_mut()[idx] = orig + eps;
            let up = eval(&work)?;
            work[li].data_mut()[idx] = orig - eps;
            let down = eval(&work)?;
            work[li].data_mut()[idx] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
            checked += 1;
            abs_err = abs_err.max((a - numeric).abs());
            scale = scale.max(a.abs()).max(numeric.abs());
            if rel > per_leaf[li] {
                per_leaf[li] = rel;
            }
            if rel > max_rel || rel.is_nan() {
                max_rel = rel;
                worst = (li, idx);
                worst_values = (a, numeric);
            }
        }
        per_leaf_scaled[li] = abs_err / scale;
    }
    Ok(GradCheckReport { max_rel_error: max_rel, per_leaf, per_leaf_scaled, worst, worst_values, entries_checked: checked })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let err = grad_check(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                Ok(t.sum(sq))
            },
            &[Tensor::scalar(3.0)],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn flags_non_determinism() {
        let calls = std::cell::Cell::new(0.0);
        let r = grad_check(
            |t, v| {
                calls.set(calls.get() + 1.0);
                let c = t.constant(Tensor::scalar(calls.get()));
                let y = t.mul(v[0], c)?;
                Ok(t.sum(y))
            },
            &[Tensor::scalar(1.0)],
            1e-5,
        );
        assert!(matches!(r, Err(GradError::NonDeterministic { .. })));
    }

    #[test]
    fn rejects_bad_epsilon() {
        let r = grad_check(|t, v| Ok(t.sum(v[0])), &[Tensor::scalar(1.0)], 0.1);
        assert!(r.is_err());
    }
}
