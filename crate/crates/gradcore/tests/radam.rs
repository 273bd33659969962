//! RAdam against an independent scalar transcription of the update rule.

use nfs_gradcore::{ParamStore, RAdamState, Tensor};

/// Straight-line scalar RAdam: returns the parameter after each step.
fn scalar_oracle(w0: f64, grads: &[f64], lr: f64) -> Vec<f64> {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
    let rho_inf = 2.0 / (1.0 - b2) - 1.0;
    let (mut m, mut v, mut w) = (0.0, 0.0, w0);
    let mut out = Vec::new();
    for (i, &g) in grads.iter().enumerate() {
        let t = (i + 1) as f64;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let m_hat = m / (1.0 - b1.powf(t));
        let rho_t = rho_inf - 2.0 * t * b2.powf(t) / (1.0 - b2.powf(t));
        if rho_t > 4.0 {
            let r = ((rho_t - 4.0) * (rho_t - 2.0) * rho_inf
                / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t))
                .sqrt();
            let v_hat = v / (1.0 - b2.powf(t));
            w -= lr * r * m_hat / (v_hat.sqrt() + eps);
        } else {
            w -= lr * m_hat;
        }
        out.push(w);
    }
    out
}

fn run(w0: f64, grads: &[f64], lr: f64) -> Vec<f64> {
    let mut p = ParamStore::new();
    p.add("w", Tensor::scalar(w0)).unwrap();
    let mut s = RAdamState::new(&p, lr);
    grads
        .iter()
        .map(|&g| {
            s.step(&mut p, &[Tensor::scalar(g)]).unwrap();
            p.values()[0].data()[0]
        })
        .collect()
}

#[test]
fn first_step_is_momentum_only() {
    let p = ParamStore::new();
    let s = RAdamState::new(&p, 1e-3);
    assert!(s.rho(1) <= 4.0, "rho_1 = {}", s.rho(1));
    // With m_hat = g at t = 1, the update is exactly lr * g whatever the magnitude.
    for g in [1e-6, 0.3, 250.0] {
        let w = run(2.0, &[g], 1e-3);
        assert_eq!(w[0], 2.0 - 1e-3 * g);
    }
}

#[test]
fn constant_gradient_trajectory_matches_oracle() {
    let got = run(1.0, &[1.0; 10], 1e-3);
    let want = scalar_oracle(1.0, &[1.0; 10], 1e-3);
    for (a, b) in got.iter().zip(&want) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn long_trajectory_crosses_rectification_threshold() {
    let grads: Vec<f64> = (0..40).map(|i| ((i as f64) * 0.7).sin() + 0.2).collect();
    let p = ParamStore::new();
    let s = RAdamState::new(&p, 1e-3);
    assert!(s.rho(4) <= 4.0 && s.rho(6) > 4.0);
    let got = run(0.5, &grads, 1e-2);
    let want = scalar_oracle(0.5, &grads, 1e-2);
    for (a, b) in got.iter().zip(&want) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

proptest::proptest! {
    #[test]
    fn zero_gradients_leave_parameters_unchanged(
        w in proptest::collection::vec(-10.0..10.0f64, 1..20),
        lr in 1e-5..1.0f64,
        steps in 1usize..12,
    ) {
        let mut p = ParamStore::new();
        p.add("w", Tensor::vector(w.clone())).unwrap();
        let mut s = RAdamState::new(&p, lr);
        let zero = Tensor::zeros([w.len()]);
        for _ in 0..steps {
            s.step(&mut p, std::slice::from_ref(&zero)).unwrap();
        }
        proptest::prop_assert_eq!(p.values()[0].data(), &w[..]);
    }
}
