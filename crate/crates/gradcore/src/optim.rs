//! Rectified Adam and global-norm gradient clipping.

use crate::error::{GradError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Rectification threshold: adaptive updates are used only once `rho_t > 4`.
const RHO_THRESHOLD: f64 = 4.0;

#[derive(Clone, Debug)]
pub struct RAdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl RAdamState {
    /// Fresh state for `params` with the usual `beta1 = 0.9`, `beta2 = 0.999`, `eps = 1e-8`.
    pub fn new(params: &ParamStore, lr: f64) -> Self {
        Self::with_hyper(params, lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyper(params: &ParamStore, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || params.values().iter().map(|t| vec![0.0; t.len()]).collect();
        Self { lr, beta1, beta2, eps, t: 0, m: zeros(), v: zeros() }
    }

    pub fn first_moment(&self, i: usize) -> &[f64] {
        &self.m[i]
    }

    pub fn second_moment(&self, i: usize) -> &[f64] {
        &self.v[i]
    }

    /// `rho_inf - 2 t beta2^t / (1 - beta2^t)`.
    pub fn rho(&self, t: u64) -> f64 {
        let rho_inf = 2.0 / (1.0 - self.beta2) - 1.0;
        let b2t = self.beta2.powi(t as i32);
        rho_inf - 2.0 * t as f64 * b2t / (1.0 - b2t)
    }

    /// Applies one update. Every gradient is validated before any parameter
    /// or moment is touched, so a rejected step leaves the state unchanged.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(GradError::contract(format!(
                "radam: {} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (i, ((name, p), g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || self.m[i].len() != p.len() {
                return Err(GradError::ShapeMismatch {
                    op: "radam",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.all_finite() {
                return Err(GradError::NonFiniteGradient(name.to_string()));
            }
        }

        self.t += 1;
        let t = self.t;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(t as i32);
        let bc2 = 1.0 - b2.powi(t as i32);
        let rho_inf = 2.0 / (1.0 - b2) - 1.0;
        let rho_t = self.rho(t);
        let rect = if rho_t > RHO_THRESHOLD {
            Some(
                ((rho_t - 4.0) * (rho_t - 2.0) * rho_inf
                    / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t))
                    .sqrt(),
            )
        } else {
            None
        };

        for (i, g) in grads.iter().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = params.values_mut()[i].data_mut();
            for k in 0..p.len() {
                let gk = g.data()[k];
                m[k] = b1 * m[k] + (1.0 - b1) * gk;
                v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
                let m_hat = m[k] / bc1;
                match rect {
                    Some(r) => {
                        let v_hat = (v[k] / bc2).sqrt();
                        p[k] -= self.lr * r * m_hat / (v_hat + self.eps);
                    }
                    None => p[k] -= self.lr * m_hat,
                }
            }
        }
        Ok(())
    }
}

/// Scales all gradients so their joint Euclidean norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let total = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if total > max_norm && total.is_finite() {
        let s = max_norm / total;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    total
}
