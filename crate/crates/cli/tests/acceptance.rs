//! Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any fails.

use std::f64::consts::PI;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use nfs_cli::RunConfig;
use nfs_core::data::{load_manifest, DATA_ROOT_ENV};
use nfs_core::dsp::{self, AudioBuffer, FramePlan, StftParams};
use nfs_core::losses::{self, EvalMetrics, MRSTFT_RESOLUTIONS, AUX_STFT};
use nfs_core::model::{FrameConditions, NfsConfig, NfsModel, Pose, RenderOptions};
use nfs_core::trainer::{self, model_grad_check, tiny_check_setup};
use nfs_gradcore::Coverage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<(bool, String), String>;

const SR: f64 = 48_000.0;

// Tolerances and budgets.
const SHIFT_TOL: f64 = 1e-9;
const FRAC_DELAY_TOL: f64 = 1e-3;
const WOLA_TOL: f64 = 1e-6;
const GRAD_TOL: f64 = 1e-4;
const OVERFIT_REDUCTION: f64 = 0.95;
const OVERFIT_MAX_STEPS: usize = 2000;
const ITD_TOL_SAMPLES: f64 = 1.0;
const PARAMS_RANGE: (f64, f64) = (0.385e6, 0.715e6);
const SHIFTERLESS_TOL: f64 = 0.15;
const MACS_TARGET: f64 = 3.4e9;
const LINEARITY_TOL: f64 = 1e-12;
const ORACLE_TOL: f64 = 1e-9;

// Desk overfit recipe.
const OVERFIT_SECONDS: &str = "60";
const OVERFIT_SOURCE: [f64; 3] = [1.0, -0.8, 0.0];
const OVERFIT_STEPS: usize = 300;
const OVERFIT_BATCH: usize = 2;
const OVERFIT_LR: f64 = 1e-2;

fn main() {
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(u32, &str, u64, fn() -> Outcome); 10] = [
        (1, "shift-theorem exactness", 10, c1_shift),
        (2, "fractional-delay fidelity", 10, c2_fractional),
        (3, "WOLA identity", 5, c3_wola),
        (4, "gradient integrity", 120, c4_gradient),
        (5, "desk-scale overfit", 900, c5_overfit),
        (6, "capacity consistency", 1, c6_capacity),
        (7, "source independence and linearity", 60, c7_linearity),
        (8, "loss-suite oracle equivalence", 30, c8_losses),
        (9, "determinism", 300, c9_determinism),
        (10, "dataset-gated epoch", u64::MAX, c10_dataset),
    ];
    let mut failed = 0;
    for (n, name, budget, f) in criteria {
        if !only.is_empty() && !only.iter().any(|o| o == &n.to_string()) {
            continue;
        }
        let t0 = Instant::now();
        let out = f();
        let el = t0.elapsed();
        let in_budget = budget == u64::MAX || el < Duration::from_secs(budget);
        let (tag, msg) = match out {
            Ok((true, m)) if in_budget => ("PASS", m),
            Ok((true, m)) => ("FAIL", format!("{m}; over the {budget} s budget")),
            Ok((false, m)) => ("FAIL", m),
            Err(m) if m.starts_with("SKIP") => ("SKIP", m),
            Err(m) => ("FAIL", format!("error: {m}")),
        };
        if tag == "FAIL" {
            failed += 1;
        }
        println!("{tag} criterion {n} ({name}): {msg} [{:.2} s]", el.as_secs_f64());
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

fn e<E: std::fmt::Display>(x: E) -> String {
    x.to_string()
}

fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den).sqrt()
}

fn noise(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

// ---------------------------------------------------------------------------

fn c1_shift() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for n in [8usize, 64, 9600] {
        let x = noise(n, &mut rng);
        let spec = dsp::dft(&x, n).map_err(e)?;
        let shifts: Vec<usize> = if n <= 64 { (0..n).collect() } else { (0..64).map(|_| rng.random_range(0..n)).collect() };
        for d in shifts {
            let f = spec.bins();
            let y = dsp::apply_shift_scale(&spec, &vec![1.0; f], &vec![d as f64; f], 1).map_err(e)?;
            let y = dsp::idft(&y.channel(0)).map_err(e)?;
            let rolled: Vec<f64> = (0..n).map(|i| x[(i + n - d) % n]).collect();
            worst = worst.max(rel_l2(&y, &rolled));
        }
    }
    Ok((worst < SHIFT_TOL, format!("max relative error {worst:.2e} (tol {SHIFT_TOL:e})")))
}

/// Kaiser-windowed sinc delay of the periodic signal `x` by `phi` samples.
fn sinc_oracle(x: &[f64], phi: f64, half: i64, beta: f64) -> Vec<f64> {
    let i0 = |v: f64| {
        let (mut s, mut term) = (1.0, 1.0);
        for k in 1..300 {
            term *= (v / 2.0) * (v / 2.0) / (k * k) as f64;
            s += term;
        }
        s
    };
    // t - m = j + frac for tap offsets j, identical for every output sample.
    let frac = (-phi).rem_euclid(1.0);
    let shift = (-phi).floor() as i64;
    let taps: Vec<(i64, f64)> = (-half + 1..=half)
        .map(|j| {
            let u = frac - j as f64;
            let r = u / half as f64;
            let w = if r.abs() >= 1.0 { 0.0 } else { i0(beta * (1.0 - r * r).sqrt()) / i0(beta) };
            let s = if u == 0.0 { 1.0 } else { (PI * u).sin() / (PI * u) };
            (j, s * w)
        })
        .collect();
    let n = x.len() as i64;
    (0..n)
        .map(|i| taps.iter().map(|(j, w)| x[(i + shift + j).rem_euclid(n) as usize] * w).sum())
        .collect()
}

fn c2_fractional() -> Outcome {
    let n = 9600;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    // Periodic, band-limited to 40% of Nyquist.
    let comps: Vec<(f64, f64, f64)> =
        (0..24).map(|_| (rng.random_range(1..1920) as f64, rng.random_range(0.1..1.0), rng.random_range(0.0..2.0 * PI))).collect();
    let x: Vec<f64> = (0..n)
        .map(|i| comps.iter().map(|(k, a, p)| a * (2.0 * PI * k * i as f64 / n as f64 + p).cos()).sum())
        .collect();
    let spec = dsp::dft(&x, n).map_err(e)?;
    let f = spec.bins();
    let mut msgs = Vec::new();
    let mut ok = true;
    for phi in [0.5, 17.25] {
        let y = dsp::apply_shift_scale(&spec, &vec![1.0; f], &vec![phi; f], 1).map_err(e)?;
        let y = dsp::idft(&y.channel(0)).map_err(e)?;
        let oracle = sinc_oracle(&x, phi, 160, 12.0);
        let err = rel_l2(&y, &oracle);
        ok &= err < FRAC_DELAY_TOL;
        msgs.push(format!("phi {phi}: {err:.2e}"));
    }
    Ok((ok, format!("{} (tol {FRAC_DELAY_TOL:e})", msgs.join(", "))))
}

fn c3_wola() -> Outcome {
    let plan = FramePlan::hann(9600, 4800).map_err(e)?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    let mut frames_seen = 0;
    for _ in 0..3 {
        let x = noise(38_400, &mut rng);
        let frames = dsp::unfold(&x, &plan).map_err(e)?;
        frames_seen = frames.shape()[0];
        let n = plan.frame_len;
        let mut out = Vec::with_capacity(frames.len());
        for fr in frames.data().chunks_exact(n) {
            let s = dsp::dft(fr, n).map_err(e)?;
            let f = s.bins();
            let y = dsp::apply_shift_scale(&s, &vec![1.0; f], &vec![0.0; f], 1).map_err(e)?;
            out.extend(dsp::idft(&y.channel(0)).map_err(e)?);
        }
        let out = nfs_gradcore::Tensor::new([frames_seen, n], out).map_err(e)?;
        let y = dsp::wola_fold(&out, &plan, Some(x.len())).map_err(e)?;
        worst = worst.max(rel_l2(&y, &x));
    }
    Ok((
        worst < WOLA_TOL && frames_seen == 9,
        format!("relative error {worst:.2e} (tol {WOLA_TOL:e}), {frames_seen} frames for 800 ms"),
    ))
}

fn c4_gradient() -> Outcome {
    let (model, item, loss) = tiny_check_setup(0, Default::default()).map_err(e)?;
    let r = model_grad_check(&model, &item, &loss, Some(0), 1e-4, Coverage::All).map_err(e)?;
    let (worst_name, worst) =
        r.groups.iter().map(|g| (g.0.as_str(), g.2)).fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a });
    Ok((
        worst < GRAD_TOL && r.groups.len() == model.params().len(),
        format!(
            "{} groups, {} entries; worst per-group error {worst:.2e} in {worst_name} (tol {GRAD_TOL:e}); \
             worst single entry {:.2e} at |grad| {:.1e}",
            r.groups.len(),
            r.entries_checked,
            r.max_rel_error,
            r.worst.2.abs()
        ),
    ))
}

fn nfs(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_nfs"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(e)?;
    if !out.status.success() {
        return Err(format!("nfs {} exited {:?}: {}", args.join(" "), out.status.code(), String::from_utf8_lossy(&out.stderr)));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

fn distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn c5_overfit() -> Outcome {
    let dir = tempfile::tempdir().map_err(e)?;
    let ds = dir.path().join("ds");
    let run = dir.path().join("run");
    let src = OVERFIT_SOURCE.map(|v| v.to_string()).join(",");
    nfs(&["synth", "--out", s(&ds), "--seconds", OVERFIT_SECONDS, "--source", &src])?;
    let manifest = ds.join("manifest.toml");
    let steps = OVERFIT_STEPS.to_string();
    nfs(&[
        "train",
        "--preset",
        "desk",
        "--data",
        s(&manifest),
        "--out",
        s(&run),
        "--set",
        &format!("train.batch={OVERFIT_BATCH}"),
        "--set",
        &format!("train.lr0={OVERFIT_LR}"),
        "--set",
        &format!("train.max_steps={steps}"),
    ])?;
    let text = std::fs::read_to_string(run.join("config.toml")).map_err(e)?;
    let cfg: RunConfig = toml::from_str(&text).map_err(e)?;
    let records = load_manifest(&manifest, None).map_err(e)?;
    let initial = NfsModel::new(cfg.model.clone(), cfg.train.seed).map_err(e)?;
    let trained = trainer::load_model(run.join("last.nfs")).map_err(e)?;
    let before = trainer::evaluate(&records, &initial, &cfg.train.loss).map_err(e)?.mean;
    let after = trainer::evaluate(&records, &trained, &cfg.train.loss).map_err(e)?.mean;
    let reduction = 1.0 - after.l2_e3 / before.l2_e3;
    let all_down = after.values().iter().zip(before.values()).all(|(a, b)| *a < b);

    let csv = nfs(&[
        "probe", "--model", s(&run.join("last.nfs")), "--axis", "lateral", "--from", &OVERFIT_SOURCE[1].to_string(),
        "--to", &OVERFIT_SOURCE[1].to_string(), "--steps", "1", "--at", &src,
    ])?;
    let rows: Vec<Vec<String>> = csv.lines().skip(1).map(|l| l.split(',').map(str::to_string).collect()).collect();
    let col = |ear: &str, name: &str| -> Result<f64, String> {
        let k = nfs_cli::PROBE_HEADER.split(',').position(|c| c == name).ok_or("no column")?;
        let row = rows.iter().find(|r| r[3] == ear).ok_or("missing ear row")?;
        row[k].parse::<f64>().map_err(e)
    };
    let ears = dsp::ear_positions(cfg.model.ear_offset);
    let dist = ears.map(|ear| distance(OVERFIT_SOURCE, ear));
    let itd_true = (dist[0] - dist[1]) * SR / cfg.model.speed_of_sound;
    let itd_model = col("left", "phi")? - col("right", "phi")?;
    let iid_true = dist[1] - dist[0];
    let iid_model = col("left", "gain")? - col("right", "gain")?;
    let ok = reduction >= OVERFIT_REDUCTION
        && OVERFIT_STEPS <= OVERFIT_MAX_STEPS
        && (itd_model - itd_true).abs() < ITD_TOL_SAMPLES
        && iid_model.signum() == iid_true.signum();
    Ok((
        ok,
        format!(
            "{OVERFIT_STEPS} steps: l2x1e3 {:.1} -> {:.1} ({:.2}% reduction, need {:.0}%), all metrics down: {all_down}; \
             ITD {itd_model:.3} vs {itd_true:.3} samples; left-right gain {iid_model:+.4} (left is nearer: {})",
            before.l2_e3,
            after.l2_e3,
            100.0 * reduction,
            100.0 * OVERFIT_REDUCTION,
            iid_true > 0.0,
        ),
    ))
}

fn c6_capacity() -> Outcome {
    let full = NfsModel::new(NfsConfig::default(), 0).map_err(e)?.count();
    let mut cfg = NfsConfig::default();
    cfg.ablation.shifter = false;
    let half = NfsModel::new(cfg, 0).map_err(e)?.count();
    let p = full.params as f64;
    let ratio = half.params as f64 / (p / 2.0) - 1.0;
    let macs = full.macs_per_second / MACS_TARGET;
    let ok = (PARAMS_RANGE.0..=PARAMS_RANGE.1).contains(&p) && ratio.abs() <= SHIFTERLESS_TOL && (0.5..=2.0).contains(&macs);
    Ok((
        ok,
        format!(
            "{} params; without Shifter {} ({:+.1}% from half); {:.2} GMAC/s ({macs:.2}x target)",
            full.params,
            half.params,
            100.0 * ratio,
            full.macs_per_second / 1e9
        ),
    ))
}

fn random_quat(rng: &mut impl Rng) -> [f64; 4] {
    let q: [f64; 4] = [0; 4].map(|_| rng.random_range(-1.0..1.0));
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    q.map(|v| v / n)
}

fn c7_linearity() -> Outcome {
    let cfg = NfsConfig::desk();
    let model = NfsModel::new(cfg.clone(), 7).map_err(e)?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let off = RenderOptions { noise: false, seed: 0 };
    let (mut worst_lin, mut worst_sup) = (0.0f64, 0.0f64);
    let mut identical = true;
    for _ in 0..50 {
        let poses: Vec<Pose> = (0..9)
            .map(|_| Pose {
                position: [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-1.0..1.0)],
                quat: random_quat(&mut rng),
            })
            .collect();
        let cond = FrameConditions::from_poses(poses, &cfg).map_err(e)?;
        let x = noise(38_400, &mut rng);
        let y = noise(38_400, &mut rng);
        let sp0 = model.sigma_phi(&cond).map_err(e)?;
        let mono = |v: Vec<f64>| AudioBuffer::mono(v, cfg.sample_rate).map_err(e);
        let rx = model.render(&mono(x.clone())?, &cond, off).map_err(e)?;
        let sp1 = model.sigma_phi(&cond).map_err(e)?;
        let ry = model.render(&mono(y.clone())?, &cond, off).map_err(e)?;
        let sp2 = model.sigma_phi(&cond).map_err(e)?;
        let r2x = model.render(&mono(x.iter().map(|v| 2.0 * v).collect())?, &cond, off).map_err(e)?;
        let rxy = model.render(&mono(x.iter().zip(&y).map(|(a, b)| a + b).collect())?, &cond, off).map_err(e)?;
        let bits = |sp: &[(nfs_gradcore::Tensor, nfs_gradcore::Tensor); 2]| -> Vec<u64> {
            sp.iter().flat_map(|(a, b)| a.data().iter().chain(b.data()).map(|v| v.to_bits())).collect()
        };
        identical &= bits(&sp0) == bits(&sp1) && bits(&sp1) == bits(&sp2);
        for c in 0..2 {
            for i in 0..x.len() {
                worst_lin = worst_lin.max((r2x.channel(c)[i] - 2.0 * rx.channel(c)[i]).abs());
                worst_sup = worst_sup.max((rxy.channel(c)[i] - rx.channel(c)[i] - ry.channel(c)[i]).abs());
            }
        }
    }
    Ok((
        identical && worst_lin < LINEARITY_TOL,
        format!(
            "sigma/phi bit-identical across inputs: {identical}; max |render(2x) - 2 render(x)| {worst_lin:.2e} \
             (tol {LINEARITY_TOL:e}); max superposition residual {worst_sup:.2e}"
        ),
    ))
}

/// Direct-summation STFT with the same framing as the library.
fn naive_stft(x: &[f64], p: &StftParams) -> Vec<(f64, f64)> {
    let frames = if x.len() <= p.fft { 1 } else { (x.len() - p.fft) / p.hop + 1 };
    let off = (p.fft - p.win) / 2;
    let w: Vec<f64> = (0..p.fft)
        .map(|i| if i >= off && i < off + p.win { (PI * (i - off) as f64 / p.win as f64).sin().powi(2) } else { 0.0 })
        .collect();
    let mut out = Vec::with_capacity(frames * (p.fft / 2 + 1));
    for m in 0..frames {
        for k in 0..=p.fft / 2 {
            let (mut re, mut im) = (0.0, 0.0);
            for i in 0..p.fft {
                let t = m * p.hop + i;
                let v = if t < x.len() { x[t] * w[i] } else { 0.0 };
                let a = -2.0 * PI * ((k * i) % p.fft) as f64 / p.fft as f64;
                re += v * a.cos();
                im += v * a.sin();
            }
            out.push((re, im));
        }
    }
    out
}

fn oracle_mrstft(est: &AudioBuffer, tgt: &AudioBuffer, res: &[StftParams]) -> f64 {
    let mag = |c: (f64, f64)| (c.0 * c.0 + c.1 * c.1).max(1e-7).sqrt();
    let mut total = 0.0;
    for p in res {
        let (mut d2, mut r2, mut la, mut n) = (0.0, 0.0, 0.0, 0.0);
        for c in 0..2 {
            let a = naive_stft(est.channel(c), p);
            let b = naive_stft(tgt.channel(c), p);
            for (u, v) in a.iter().zip(&b) {
                let (mu, mv) = (mag(*u), mag(*v));
                d2 += (mu - mv) * (mu - mv);
                r2 += mv * mv;
                la += (mu.ln() - mv.ln()).abs();
                n += 1.0;
            }
        }
        total += (d2 / r2).sqrt() + la / n;
    }
    total
}

fn wrap(d: f64) -> f64 {
    let w = (d + PI).rem_euclid(2.0 * PI) - PI;
    if w == -PI {
        PI
    } else {
        w
    }
}

fn oracle_phase(est: &AudioBuffer, tgt: &AudioBuffer, p: &StftParams, floor: f64) -> f64 {
    let (mut sum, mut n) = (0.0, 0.0);
    for c in 0..2 {
        let a = naive_stft(est.channel(c), p);
        let b = naive_stft(tgt.channel(c), p);
        let mag = |z: &(f64, f64)| z.0.hypot(z.1);
        let ma = a.iter().map(mag).fold(0.0, f64::max);
        let mb = b.iter().map(mag).fold(0.0, f64::max);
        for (u, v) in a.iter().zip(&b) {
            if mag(u) >= floor * ma && mag(v) >= floor * mb {
                sum += wrap(u.1.atan2(u.0) - v.1.atan2(v.0)).abs();
                n += 1.0;
            }
        }
    }
    sum / n
}

fn c8_losses() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let len = 4096;
    let stereo = |rng: &mut ChaCha8Rng, g: f64| {
        AudioBuffer::stereo(noise(len, rng).iter().map(|v| v * g).collect(), noise(len, rng), 48_000).expect("stereo")
    };
    let (x, y) = (stereo(&mut rng, 1.0), stereo(&mut rng, 0.5));
    let mut checks = Vec::new();

    let m = losses::mrstft(&x, &y, &MRSTFT_RESOLUTIONS).map_err(e)?;
    let mo = oracle_mrstft(&x, &y, &MRSTFT_RESOLUTIONS);
    checks.push(("mrstft vs naive STFT", ((m - mo) / mo).abs(), ORACLE_TOL));

    let ph = losses::phase_loss(&x, &y, &AUX_STFT, 1e-4).map_err(e)?;
    let pho = oracle_phase(&x, &y, &AUX_STFT, 1e-4);
    checks.push(("phase vs wrap oracle", ((ph - pho) / pho).abs(), ORACLE_TOL));
    let sym = losses::phase_loss(&y, &x, &AUX_STFT, 1e-4).map_err(e)?;
    checks.push(("phase symmetry", (ph - sym).abs(), 1e-12));
    checks.push(("wrap(pi-0.01 - (-pi+0.01))", (wrap(PI - 0.01 - (-PI + 0.01)).abs() - 0.02).abs(), 1e-12));

    let iid = losses::iid(&x, &AUX_STFT).map_err(e)?;
    let swapped = AudioBuffer::stereo(x.channel(1).to_vec(), x.channel(0).to_vec(), 48_000).map_err(e)?;
    checks.push(("iid antisymmetry", (losses::iid(&swapped, &AUX_STFT).map_err(e)? + iid).abs(), 1e-12));
    let scaled = AudioBuffer::stereo(x.channel(0).iter().map(|v| v * 3.7).collect(), x.channel(1).iter().map(|v| v * 3.7).collect(), 48_000)
        .map_err(e)?;
    checks.push(("iid scale invariance", (losses::iid(&scaled, &AUX_STFT).map_err(e)? - iid).abs(), 1e-12));
    let tenfold = AudioBuffer::stereo(x.channel(1).iter().map(|v| v * 10.0).collect(), x.channel(1).to_vec(), 48_000).map_err(e)?;
    checks.push(("iid of L = 10 R", (losses::iid(&tenfold, &AUX_STFT).map_err(e)? - 1.0).abs(), 1e-12));

    let zero = losses::composite(&x, &x, &Default::default()).map_err(e)?;
    checks.push(("composite on identical pair", zero.total.abs(), 0.0 + f64::EPSILON));

    let ok = checks.iter().all(|(_, v, tol)| *v <= *tol);
    let detail: Vec<String> = checks.iter().map(|(n, v, _)| format!("{n} {v:.1e}")).collect();
    Ok((ok, detail.join("; ")))
}

fn c9_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(e)?;
    let ds = dir.path().join("ds");
    nfs(&["synth", "--out", s(&ds), "--seconds", "4", "--source", "0.5,0.7,0.2", "--seed", "3"])?;
    let manifest = ds.join("manifest.toml");
    let mut ckpts = Vec::new();
    for k in 0..2 {
        let run = dir.path().join(format!("run{k}"));
        nfs(&[
            "train", "--preset", "desk", "--seed", "11", "--data", s(&manifest), "--out", s(&run), "--set", "train.batch=1",
            "--set", "train.max_steps=50",
        ])?;
        let read = |f: &str| std::fs::read(run.join(f)).map_err(e);
        ckpts.push((read("last.nfs")?, read("log.csv")?));
    }
    let train_same = ckpts[0] == ckpts[1];
    let model = dir.path().join("run0").join("last.nfs");
    let mut renders = Vec::new();
    for k in 0..2 {
        let out = dir.path().join(format!("r{k}.wav"));
        nfs(&[
            "render", "--model", s(&model), "--mono", s(&ds.join("synth000_mono.wav")), "--poses",
            s(&ds.join("synth000_poses.csv")), "--out", s(&out), "--seed", "5",
        ])?;
        renders.push(std::fs::read(&out).map_err(e)?);
    }
    let render_same = renders[0] == renders[1];
    Ok((train_same && render_same, format!("50-step train identical: {train_same}; render identical: {render_same}")))
}

fn c10_dataset() -> Outcome {
    let Some(root) = std::env::var_os(DATA_ROOT_ENV) else {
        return Err(format!("SKIP: {DATA_ROOT_ENV} not set"));
    };
    let root = std::path::PathBuf::from(root);
    let manifest = root.join("manifest.toml");
    if !manifest.exists() {
        return Err(format!("SKIP: no manifest.toml under {}", root.display()));
    }
    let dir = tempfile::tempdir().map_err(e)?;
    let run = dir.path().join("run");
    nfs(&["train", "--data", s(&manifest), "--out", s(&run), "--set", "train.epochs=1"])?;
    let log = std::fs::read_to_string(run.join("log.csv")).map_err(e)?;
    let totals: Vec<f64> = log.lines().skip(1).filter_map(|l| l.split(',').nth(9)?.parse().ok()).collect();
    let win = (totals.len() / 4).max(1);
    let smooth: Vec<f64> = totals.windows(win).step_by(win).map(|w| w.iter().sum::<f64>() / win as f64).collect();
    let monotone = smooth.windows(2).all(|w| w[1] <= w[0]);
    let table = nfs(&["eval", "--model", s(&run.join("last.nfs")), "--data", s(&manifest)])?;
    let header_ok = table.lines().next().is_some_and(|h| {
        let cols: Vec<&str> = h.split_whitespace().collect();
        cols[1..] == EvalMetrics::COLUMNS
    });
    Ok((monotone && header_ok, format!("smoothed loss {smooth:.3?}; eval columns: {header_ok}")))
}
