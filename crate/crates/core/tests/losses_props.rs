use nfs_core::dsp::{stft, AudioBuffer, StftParams};
use nfs_core::losses::{
    amplitude_error, composite, eval_metrics, iid, iid_loss, l2_wave, mrstft, phase_loss, LossConfig,
};
use proptest::prelude::*;

const LEN: usize = 512;

fn small_cfg() -> LossConfig {
    LossConfig {
        mrstft: vec![StftParams::new(64, 16, 64), StftParams::new(128, 32, 96)],
        aux: StftParams::new(128, 32, 128),
        ..LossConfig::default()
    }
}

fn stereo() -> impl Strategy<Value = AudioBuffer> {
    (prop::collection::vec(-1.0..1.0f64, LEN), prop::collection::vec(-1.0..1.0f64, LEN))
        .prop_map(|(l, r)| AudioBuffer::stereo(l, r, 48_000).unwrap())
}

fn map(x: &AudioBuffer, f: impl Fn(usize, f64) -> f64) -> AudioBuffer {
    let ch = |c: usize| x.channel(c).iter().map(|v| f(c, *v)).collect::<Vec<_>>();
    AudioBuffer::stereo(ch(0), ch(1), x.sample_rate).unwrap()
}

fn swap(x: &AudioBuffer) -> AudioBuffer {
    AudioBuffer::stereo(x.channel(1).to_vec(), x.channel(0).to_vec(), x.sample_rate).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn composite_is_nonnegative_and_zero_on_identity(est in stereo(), target in stereo()) {
        let cfg = small_cfg();
        let b = composite(&est, &target, &cfg).unwrap();
        for v in [b.l2, b.phase, b.iid, b.stft, b.total] {
            prop_assert!(v >= 0.0 && v.is_finite());
        }
        let z = composite(&target, &target, &cfg).unwrap();
        prop_assert_eq!(z.total, 0.0);
        let m = eval_metrics(&target, &target, &cfg).unwrap();
        prop_assert_eq!(m.values(), [0.0; 4]);
    }

    #[test]
    fn l2_is_a_metric(a in stereo(), b in stereo(), c in stereo()) {
        let ab = l2_wave(&a, &b).unwrap();
        prop_assert_eq!(ab, l2_wave(&b, &a).unwrap());
        prop_assert!(ab <= l2_wave(&a, &c).unwrap() + l2_wave(&c, &b).unwrap() + 1e-12);
    }

    #[test]
    fn phase_loss_is_symmetric_and_bounded(a in stereo(), b in stereo()) {
        let p = small_cfg().aux;
        let ab = phase_loss(&a, &b, &p, 1e-4).unwrap();
        prop_assert!((ab - phase_loss(&b, &a, &p, 1e-4).unwrap()).abs() < 1e-12);
        prop_assert!((0.0..=std::f64::consts::PI).contains(&ab));
    }

    #[test]
    fn phase_ignores_positive_gain(a in stereo(), g in 0.1..10.0f64) {
        let p = small_cfg().aux;
        let scaled = map(&a, |_, v| g * v);
        prop_assert!(phase_loss(&scaled, &a, &p, 1e-4).unwrap() < 1e-7);
        let flipped = map(&a, |_, v| -v);
        let pi = phase_loss(&flipped, &a, &p, 1e-4).unwrap();
        prop_assert!((pi - std::f64::consts::PI).abs() < 1e-7);
    }

    #[test]
    fn iid_flips_with_channels_and_ignores_common_gain(a in stereo(), g in 0.01..100.0f64) {
        let p = small_cfg().aux;
        let v = iid(&a, &p).unwrap();
        prop_assert!((iid(&swap(&a), &p).unwrap() + v).abs() < 1e-12);
        prop_assert!((iid(&map(&a, |_, x| g * x), &p).unwrap() - v).abs() < 1e-9);
        let lopsided = map(&a, |c, x| if c == 0 { g * x } else { x });
        prop_assert!((iid(&lopsided, &p).unwrap() - v - g.log10()).abs() < 1e-9);
    }

    #[test]
    fn iid_loss_is_symmetric(a in stereo(), b in stereo()) {
        let p = small_cfg().aux;
        prop_assert_eq!(iid_loss(&a, &b, &p).unwrap(), iid_loss(&b, &a, &p).unwrap());
    }

    #[test]
    fn doubling_gives_unit_convergence_and_log_two(a in stereo()) {
        let p = StftParams::new(64, 16, 64);
        // The identity holds only above the magnitude floor.
        let min_power = (0..2)
            .flat_map(|c| {
                let (re, im) = stft(a.channel(c), &p);
                re.into_iter().zip(im).map(|(x, y)| x * x + y * y).collect::<Vec<_>>()
            })
            .fold(f64::INFINITY, f64::min);
        prop_assume!(min_power > 1e-6);
        let doubled = map(&a, |_, v| 2.0 * v);
        let want = 1.0 + 2f64.ln();
        prop_assert!((mrstft(&doubled, &a, &[p]).unwrap() - want).abs() < 1e-6);
        prop_assert!((mrstft(&doubled, &a, &[p, p]).unwrap() - 2.0 * want).abs() < 2e-6);
    }

    #[test]
    fn doubling_amplitude_error_is_mean_power(a in stereo()) {
        let p = small_cfg().aux;
        let doubled = map(&a, |_, v| 2.0 * v);
        let mut acc = 0.0;
        let mut n = 0.0;
        for c in 0..2 {
            let (re, im) = stft(a.channel(c), &p);
            for (x, y) in re.iter().zip(&im) {
                acc += x * x + y * y;
                n += 1.0;
            }
        }
        let got = amplitude_error(&doubled, &a, &p).unwrap();
        prop_assert!((got - acc / n).abs() <= 1e-9 * got);
    }
}

#[test]
fn mismatched_inputs_are_rejected() {
    let a = AudioBuffer::stereo(vec![0.0; LEN], vec![0.0; LEN], 48_000).unwrap();
    let short = AudioBuffer::stereo(vec![0.0; LEN - 1], vec![0.0; LEN - 1], 48_000).unwrap();
    let mono = AudioBuffer::mono(vec![0.0; LEN], 48_000).unwrap();
    let cfg = small_cfg();
    assert!(composite(&a, &short, &cfg).is_err());
    assert!(composite(&mono, &mono, &cfg).is_err());
    assert!(iid(&mono, &cfg.aux).is_err());
}

#[test]
fn silent_pair_has_no_phase_term() {
    let z = AudioBuffer::stereo(vec![0.0; LEN], vec![0.0; LEN], 48_000).unwrap();
    assert_eq!(phase_loss(&z, &z, &small_cfg().aux, 1e-4).unwrap(), 0.0);
}
