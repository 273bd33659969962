use nfs_core::dsp::AudioBuffer;
use nfs_core::model::{activate_and_bias, DelayUnit, FrameConditions, NfsConfig, NfsModel, Pose, RenderOptions};
use nfs_core::trainer::load_model;
use nfs_gradcore::{Tape, Tensor};
use proptest::prelude::*;

const QUIET: RenderOptions = RenderOptions { noise: false, seed: 0 };

fn tiny(seed: u64) -> NfsModel {
    NfsModel::new(NfsConfig::tiny(), seed).unwrap()
}

fn cond_for(m: &NfsModel, len: usize, pos: [f64; 3]) -> FrameConditions {
    let frames = m.config().plan().unwrap().num_frames(len).unwrap();
    FrameConditions::from_poses(vec![Pose::at(pos); frames], m.config()).unwrap()
}

fn render(m: &NfsModel, x: &[f64], cond: &FrameConditions) -> AudioBuffer {
    m.render(&AudioBuffer::mono(x.to_vec(), m.config().sample_rate).unwrap(), cond, QUIET).unwrap()
}

fn position() -> impl Strategy<Value = [f64; 3]> {
    prop::array::uniform3(-2.0..2.0f64).prop_filter("away from the head", |p| p.iter().map(|v| v * v).sum::<f64>() > 0.09)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn phase_delay_stays_in_band(seed in 0u64..1000, pos in prop::collection::vec(position(), 1..6)) {
        let m = tiny(seed);
        let cond = FrameConditions::from_poses(pos.into_iter().map(Pose::at).collect(), m.config()).unwrap();
        let bound = m.config().shift_bound();
        let sp = m.sigma_phi(&cond).unwrap();
        let per_frame = m.config().chan * m.config().freq();
        for (e, (sigma, phi)) in sp.iter().enumerate() {
            prop_assert!(sigma.data().iter().all(|s| *s > 0.0 && s.is_finite()));
            for (i, p) in phi.data().iter().enumerate() {
                let g = cond.g[e][i / per_frame];
                prop_assert!(*p >= g && *p <= g + bound, "phi {p} outside [{g}, {}]", g + bound);
            }
        }
    }

    #[test]
    fn scale_falls_with_inverse_square_delay(raw in -5.0..5.0f64, g1 in 1.0..5000.0f64, g2 in 1.0..5000.0f64) {
        for unit in [DelayUnit::Samples, DelayUnit::Millis] {
            let mut cfg = NfsConfig::tiny();
            cfg.ablation.shifter = false;
            cfg.delay_unit = unit;
            let mut t = Tape::new();
            let r = t.constant(Tensor::full([1, 1, 1], raw));
            let mut sigma_at = |g: f64| {
                let g = t.constant(Tensor::full([1, 1, 1], g));
                let (s, _) = activate_and_bias(&mut t, &cfg, r, None, g).unwrap();
                t.value(s).data()[0]
            };
            let (s1, s2) = (sigma_at(g1), sigma_at(g2));
            prop_assert!((s1 * g1 * g1 / (s2 * g2 * g2) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn render_is_superposable(
        x in prop::collection::vec(-1.0..1.0f64, 160),
        y in prop::collection::vec(-1.0..1.0f64, 160),
        a in -3.0..3.0f64,
        b in -3.0..3.0f64,
        pos in position(),
    ) {
        let m = tiny(7);
        let cond = cond_for(&m, x.len(), pos);
        let mix: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
        let (rx, ry, rm) = (render(&m, &x, &cond), render(&m, &y, &cond), render(&m, &mix, &cond));
        for ch in 0..2 {
            for i in 0..x.len() {
                let want = a * rx.channel(ch)[i] + b * ry.channel(ch)[i];
                prop_assert!((rm.channel(ch)[i] - want).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn swapping_ear_parameters_swaps_channels() {
    let m = tiny(21);
    let x: Vec<f64> = (0..200).map(|i| (i as f64 * 0.21).sin() + 0.3 * (i as f64 * 1.7).cos()).collect();
    let cond = cond_for(&m, x.len(), [0.7, -0.5, 0.2]);
    let before = render(&m, &x, &cond);

    let mut swapped = m.clone();
    let names: Vec<String> = m.params().iter().map(|(n, _)| n.to_string()).filter(|n| n.starts_with("left.")).collect();
    for name in names {
        let other = name.replacen("left.", "right.", 1);
        let l = m.params().by_name(&name).unwrap().clone();
        let r = m.params().by_name(&other).unwrap().clone();
        *swapped.params_mut().by_name_mut(&name).unwrap() = r;
        *swapped.params_mut().by_name_mut(&other).unwrap() = l;
    }
    let [gl, gr] = cond.g.clone();
    let mirrored = FrameConditions::with_g(cond.poses.clone(), [gr, gl]).unwrap();
    let after = render(&swapped, &x, &mirrored);
    assert_eq!(after.channel(0), before.channel(1));
    assert_eq!(after.channel(1), before.channel(0));
}

#[test]
fn ears_render_independently() {
    let m = tiny(4);
    let x: Vec<f64> = (0..160).map(|i| ((i * 37) % 11) as f64 / 11.0 - 0.5).collect();
    let cond = cond_for(&m, x.len(), [1.0, 0.3, 0.0]);
    let base = render(&m, &x, &cond);
    let mut other = m.clone();
    for (name, v) in m.params().iter() {
        if name.starts_with("right.") {
            let bumped = v.map(|w| w * 1.5 + 0.01);
            *other.params_mut().by_name_mut(name).unwrap() = bumped;
        }
    }
    let out = render(&other, &x, &cond);
    assert_eq!(out.channel(0), base.channel(0));
    assert_ne!(out.channel(1), base.channel(1));
}

#[test]
fn construction_and_render_are_deterministic() {
    let (a, b) = (tiny(99), tiny(99));
    assert_eq!(a.params().values(), b.params().values());
    assert_ne!(a.params().values(), tiny(100).params().values());
    let x: Vec<f64> = (0..130).map(|i| (i as f64 * 0.05).cos()).collect();
    let cond = cond_for(&a, x.len(), [-0.4, 0.9, 0.1]);
    let noisy = RenderOptions { noise: true, seed: 3 };
    let mono = AudioBuffer::mono(x, a.config().sample_rate).unwrap();
    assert_eq!(a.render(&mono, &cond, noisy).unwrap(), b.render(&mono, &cond, noisy).unwrap());
}

#[test]
fn saved_checkpoint_renders_identically() {
    let m = tiny(12);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.nfs");
    m.to_checkpoint().save(&path).unwrap();
    let back = load_model(&path).unwrap();
    assert_eq!(back.config(), m.config());
    let x: Vec<f64> = (0..190).map(|i| (i as f64 * 0.3).sin()).collect();
    let cond = cond_for(&m, x.len(), [0.5, 0.5, 0.5]);
    assert_eq!(render(&m, &x, &cond), render(&back, &x, &cond));
}

#[test]
fn frames_and_conditions_must_agree() {
    let m = tiny(0);
    let x = vec![0.1; 160];
    let cond = cond_for(&m, x.len() * 2, [1.0, 0.0, 0.0]);
    let mono = AudioBuffer::mono(x, m.config().sample_rate).unwrap();
    assert!(m.render(&mono, &cond, QUIET).is_err());
    let stereo = AudioBuffer::stereo(vec![0.0; 160], vec![0.0; 160], m.config().sample_rate).unwrap();
    assert!(m.render(&stereo, &cond_for(&m, 160, [1.0, 0.0, 0.0]), QUIET).is_err());
}
