//! Training objective and evaluation metrics, each with a plain version and,
//! for the training terms, a differentiable one recorded on a [`Tape`].

use std::f64::consts::LN_10;

use nfs_gradcore::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::dsp::{self, AudioBuffer, StftParams};
use crate::error::{NfsError, Result};

/// Multi-resolution STFT resolutions as `(fft, hop, window)`.
pub const MRSTFT_RESOLUTIONS: [StftParams; 3] =
    [StftParams::new(512, 50, 240), StftParams::new(1024, 120, 600), StftParams::new(2048, 240, 1200)];

/// Transform used by the phase, IID and amplitude terms.
pub const AUX_STFT: StftParams = StftParams::new(2048, 480, 2048);

/// Power floor before taking log-magnitudes for the IID (magnitude 1e-8).
const IID_POWER_FLOOR: f64 = 1e-16;
/// Power floor for MRSTFT magnitudes.
const MAG_POWER_FLOOR: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub l2: f64,
    pub phase: f64,
    pub iid: f64,
    pub stft: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { l2: 1000.0, phase: 1.0, iid: 10.0, stft: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub mrstft: Vec<StftParams>,
    pub aux: StftParams,
    /// Phase is compared only where both magnitudes reach this fraction of
    /// their per-channel maximum.
    pub phase_floor: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            mrstft: MRSTFT_RESOLUTIONS.to_vec(),
            aux: AUX_STFT,
            phase_floor: 1e-4,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let w = self.weights;
        if [w.l2, w.phase, w.iid, w.stft].iter().any(|v| !(*v >= 0.0)) {
            return Err(NfsError::Config(format!("loss weights must be >= 0: {w:?}")));
        }
        if self.mrstft.is_empty() {
            return Err(NfsError::Config("at least one MRSTFT resolution is required".into()));
        }
        for p in self.mrstft.iter().chain([&self.aux]) {
            p.validate()?;
        }
        if !(self.phase_floor >= 0.0 && self.phase_floor < 1.0) {
            return Err(NfsError::Config(format!("phase_floor {} outside [0, 1)", self.phase_floor)));
        }
        Ok(())
    }
}

/// Per-term values and their weighted sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l2: f64,
    pub phase: f64,
    pub iid: f64,
    pub stft: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn weighted(l2: f64, phase: f64, iid: f64, stft: f64, w: &LossWeights) -> Self {
        let total = w.l2 * l2 + w.phase * phase + w.iid * iid + w.stft * stft;
        Self { l2, phase, iid, stft, total }
    }
}

/// Evaluation columns: `l2 * 1e3`, amplitude error, phase loss, MRSTFT.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub l2_e3: f64,
    pub amp: f64,
    pub phase: f64,
    pub stft: f64,
}

impl EvalMetrics {
    pub const COLUMNS: [&'static str; 4] = ["l2x1e3", "amp", "phase", "mrstft"];

    pub fn values(&self) -> [f64; 4] {
        [self.l2_e3, self.amp, self.phase, self.stft]
    }

    pub fn mean(items: &[EvalMetrics]) -> EvalMetrics {
        let n = items.len().max(1) as f64;
        let mut m = EvalMetrics::default();
        for it in items {
            m.l2_e3 += it.l2_e3 / n;
            m.amp += it.amp / n;
            m.phase += it.phase / n;
            m.stft += it.stft / n;
        }
        m
    }
}

fn check_pair(est: &AudioBuffer, target: &AudioBuffer) -> Result<()> {
    if est.num_channels() != target.num_channels() || est.len() != target.len() {
        return Err(NfsError::contract(format!(
            "estimate {}x{} vs target {}x{}",
            est.num_channels(),
            est.len(),
            target.num_channels(),
            target.len()
        )));
    }
    Ok(())
}

fn check_stereo(x: &AudioBuffer) -> Result<()> {
    if x.num_channels() != 2 {
        return Err(NfsError::contract(format!("expected stereo, got {} channels", x.num_channels())));
    }
    Ok(())
}

fn power(re: &[f64], im: &[f64]) -> Vec<f64> {
    re.iter().zip(im).map(|(a, b)| a * a + b * b).collect()
}

/// Euclidean norm of the sample-wise difference over all channels.
pub fn l2_wave(est: &AudioBuffer, target: &AudioBuffer) -> Result<f64> {
    check_pair(est, target)?;
    let mut acc = 0.0;
    for c in 0..est.num_channels() {
        for (a, b) in est.channel(c).iter().zip(target.channel(c)) {
            acc += (a - b) * (a - b);
        }
    }
    Ok(acc.sqrt())
}

/// `1` where both magnitudes reach `floor` times their own maximum.
fn phase_mask(p_est: &[f64], p_tgt: &[f64], floor: f64) -> Vec<f64> {
    let max_e = p_est.iter().cloned().fold(0.0, f64::max).sqrt();
    let max_t = p_tgt.iter().cloned().fold(0.0, f64::max).sqrt();
    p_est
        .iter()
        .zip(p_tgt)
        .map(|(e, t)| {
            let keep = max_e > 0.0 && max_t > 0.0 && e.sqrt() >= floor * max_e && t.sqrt() >= floor * max_t;
            if keep {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

/// Mean absolute wrapped phase difference over unmasked STFT bins of all
/// channels; `0` when no bin survives the mask.
pub fn phase_loss(est: &AudioBuffer, target: &AudioBuffer, p: &StftParams, floor: f64) -> Result<f64> {
    check_pair(est, target)?;
    let (mut sum, mut count) = (0.0, 0.0);
    for c in 0..est.num_channels() {
        let (a, b) = dsp::stft(est.channel(c), p);
        let (cr, ci) = dsp::stft(target.channel(c), p);
        let mask = phase_mask(&power(&a, &b), &power(&cr, &ci), floor);
        for i in 0..a.len() {
            if mask[i] > 0.0 {
                let re = a[i] * cr[i] + b[i] * ci[i];
                let im = b[i] * cr[i] - a[i] * ci[i];
                sum += im.atan2(re).abs();
                count += 1.0;
            }
        }
    }
    Ok(if count > 0.0 { sum / count } else { 0.0 })
}

/// Mean over frames and bins of `log10|X_L| - log10|X_R|`.
pub fn iid(x: &AudioBuffer, p: &StftParams) -> Result<f64> {
    check_stereo(x)?;
    let mean_log = |ch: &[f64]| {
        let (re, im) = dsp::stft(ch, p);
        let pw = power(&re, &im);
        pw.iter().map(|v| 0.5 * v.max(IID_POWER_FLOOR).log10()).sum::<f64>() / pw.len() as f64
    };
    Ok(mean_log(x.channel(0)) - mean_log(x.channel(1)))
}

pub fn iid_loss(est: &AudioBuffer, target: &AudioBuffer, p: &StftParams) -> Result<f64> {
    check_pair(est, target)?;
    Ok((iid(est, p)? - iid(target, p)?).abs())
}

fn floored_mag(re: &[f64], im: &[f64]) -> Vec<f64> {
    power(re, im).into_iter().map(|v| v.max(MAG_POWER_FLOOR).sqrt()).collect()
}

/// Sum over resolutions of spectral convergence (Frobenius norm over all
/// channels jointly) plus mean absolute log-magnitude difference.
pub fn mrstft(est: &AudioBuffer, target: &AudioBuffer, res: &[StftParams]) -> Result<f64> {
    check_pair(est, target)?;
    let mut total = 0.0;
    for p in res {
        let (mut diff2, mut ref2, mut log_abs, mut n) = (0.0, 0.0, 0.0, 0.0);
        for c in 0..est.num_channels() {
            let (a, b) = dsp::stft(est.channel(c), p);
            let (cr, ci) = dsp::stft(target.channel(c), p);
            let me = floored_mag(&a, &b);
            let mt = floored_mag(&cr, &ci);
            for (e, t) in me.iter().zip(&mt) {
                diff2 += (e - t) * (e - t);
                ref2 += t * t;
                log_abs += (e.ln() - t.ln()).abs();
                n += 1.0;
            }
        }
        total += (diff2 / ref2).sqrt() + log_abs / n;
    }
    Ok(total)
}

/// Mean squared difference of STFT magnitudes over channels, frames and bins.
pub fn amplitude_error(est: &AudioBuffer, target: &AudioBuffer, p: &StftParams) -> Result<f64> {
    check_pair(est, target)?;
    let (mut acc, mut n) = (0.0, 0.0);
    for c in 0..est.num_channels() {
        let (a, b) = dsp::stft(est.channel(c), p);
        let (cr, ci) = dsp::stft(target.channel(c), p);
        for (e, t) in power(&a, &b).iter().zip(power(&cr, &ci)) {
            let d = e.sqrt() - t.sqrt();
            acc += d * d;
            n += 1.0;
        }
    }
    Ok(acc / n)
}

pub fn composite(est: &AudioBuffer, target: &AudioBuffer, cfg: &LossConfig) -> Result<LossBreakdown> {
    check_pair(est, target)?;
    check_stereo(est)?;
    Ok(LossBreakdown::weighted(
        l2_wave(est, target)?,
        phase_loss(est, target, &cfg.aux, cfg.phase_floor)?,
        iid_loss(est, target, &cfg.aux)?,
        mrstft(est, target, &cfg.mrstft)?,
        &cfg.weights,
    ))
}

pub fn eval_metrics(est: &AudioBuffer, target: &AudioBuffer, cfg: &LossConfig) -> Result<EvalMetrics> {
    check_pair(est, target)?;
    Ok(EvalMetrics {
        l2_e3: 1e3 * l2_wave(est, target)?,
        amp: amplitude_error(est, target, &cfg.aux)?,
        phase: phase_loss(est, target, &cfg.aux, cfg.phase_floor)?,
        stft: mrstft(est, target, &cfg.mrstft)?,
    })
}

// ---------------------------------------------------------------------------
// Differentiable versions

/// STFT of a 1-D tape variable: `(re, im)`, each `[frames, bins]`, laid out
/// exactly as [`dsp::stft`].
pub fn stft_tape(t: &mut Tape, x: Var, p: &StftParams) -> Result<(Var, Var)> {
    let len = t.shape(x)[0];
    let x = if len < p.fft {
        let z = t.constant(Tensor::zeros([p.fft - len]));
        t.concat(&[x, z], 0)?
    } else {
        x
    };
    let frames = t.frame(x, p.fft, p.hop)?;
    let w = t.constant(Tensor::vector(p.window()));
    let frames = t.mul(frames, w)?;
    let spec = t.rfft(frames)?;
    let bins = p.bins();
    let re = t.slice(spec, 1, 0, bins)?;
    let im = t.slice(spec, 1, bins, bins)?;
    Ok((re, im))
}

fn power_tape(t: &mut Tape, re: Var, im: Var) -> Result<Var> {
    let a = t.mul(re, re)?;
    let b = t.mul(im, im)?;
    Ok(t.add(a, b)?)
}

/// Training terms recorded on a tape: estimate `[left, right]` variables
/// against a constant stereo target.
pub struct TapeLoss {
    pub total: Var,
    pub l2: Var,
    pub phase: Var,
    pub iid: Var,
    pub stft: Var,
}

impl TapeLoss {
    pub fn breakdown(&self, t: &Tape) -> Result<LossBreakdown> {
        let item = |v: Var| t.value(v).item();
        Ok(LossBreakdown {
            l2: item(self.l2)?,
            phase: item(self.phase)?,
            iid: item(self.iid)?,
            stft: item(self.stft)?,
            total: item(self.total)?,
        })
    }
}

pub fn l2_tape(t: &mut Tape, est: [Var; 2], target: &AudioBuffer) -> Result<Var> {
    let y = t.concat(&est, 0)?;
    let mut tgt = target.channel(0).to_vec();
    tgt.extend_from_slice(target.channel(1));
    let tgt = t.constant(Tensor::vector(tgt));
    let d = t.sub(y, tgt)?;
    Ok(t.norm(d))
}

pub fn phase_tape(t: &mut Tape, est: [Var; 2], target: &AudioBuffer, p: &StftParams, floor: f64) -> Result<Var> {
    let mut terms = Vec::with_capacity(2);
    let mut count = 0.0;
    for (c, &x) in est.iter().enumerate() {
        let (a, b) = stft_tape(t, x, p)?;
        let (cr, ci) = dsp::stft(target.channel(c), p);
        let shape = t.shape(a).to_vec();
        let p_est = power(t.value(a).data(), t.value(b).data());
        let mask = phase_mask(&p_est, &power(&cr, &ci), floor);
        count += mask.iter().sum::<f64>();
        let unmasked: Vec<f64> = mask.iter().map(|m| 1.0 - m).collect();
        let mask = t.constant(Tensor::new(shape.clone(), mask)?);
        let unmasked = t.constant(Tensor::new(shape.clone(), unmasked)?);
        let cr = t.constant(Tensor::new(shape.clone(), cr)?);
        let ci = t.constant(Tensor::new(shape, ci)?);
        // Re/Im of est * conj(target).
        let ac = t.mul(a, cr)?;
        let bd = t.mul(b, ci)?;
        let re = t.add(ac, bd)?;
        let bc = t.mul(b, cr)?;
        let ad = t.mul(a, ci)?;
        let im = t.sub(bc, ad)?;
        // Masked bins are moved to (1, 0) so their angle and its gradient vanish.
        let re = t.mul(re, mask)?;
        let re = t.add(re, unmasked)?;
        let im = t.mul(im, mask)?;
        let ang = t.atan2(im, re)?;
        let ang = t.abs(ang);
        terms.push(t.sum(ang));
    }
    let s = t.add(terms[0], terms[1])?;
    Ok(t.scale(s, if count > 0.0 { 1.0 / count } else { 0.0 }))
}

fn mean_log10_tape(t: &mut Tape, x: Var, p: &StftParams) -> Result<Var> {
    let (re, im) = stft_tape(t, x, p)?;
    let pw = power_tape(t, re, im)?;
    let pw = t.clamp_min(pw, IID_POWER_FLOOR);
    let l = t.log(pw)?;
    let m = t.mean(l);
    Ok(t.scale(m, 0.5 / LN_10))
}

pub fn iid_tape(t: &mut Tape, est: [Var; 2], target: &AudioBuffer, p: &StftParams) -> Result<Var> {
    let l = mean_log10_tape(t, est[0], p)?;
    let r = mean_log10_tape(t, est[1], p)?;
    let d = t.sub(l, r)?;
    let d = t.offset(d, -iid(target, p)?);
    Ok(t.abs(d))
}

pub fn mrstft_tape(t: &mut Tape, est: [Var; 2], target: &AudioBuffer, res: &[StftParams]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for p in res {
        let mut diffs = Vec::with_capacity(2);
        let mut logs = Vec::with_capacity(2);
        let (mut ref2, mut n) = (0.0, 0.0);
        for (c, &x) in est.iter().enumerate() {
            let (a, b) = stft_tape(t, x, p)?;
            let (cr, ci) = dsp::stft(target.channel(c), p);
            let mt = floored_mag(&cr, &ci);
            ref2 += mt.iter().map(|v| v * v).sum::<f64>();
            n += mt.len() as f64;
            let shape = t.shape(a).to_vec();
            let log_t = t.constant(Tensor::new(shape.clone(), mt.iter().map(|v| v.ln()).collect())?);
            let mt = t.constant(Tensor::new(shape, mt)?);
            let pw = power_tape(t, a, b)?;
            let pw = t.clamp_min(pw, MAG_POWER_FLOOR);
            let me = t.sqrt(pw)?;
            diffs.push(t.sub(me, mt)?);
            let log_e = t.log(me)?;
            let ld = t.sub(log_e, log_t)?;
            let ld = t.abs(ld);
            logs.push(t.sum(ld));
        }
        let d = t.concat(&diffs, 0)?;
        let sc = t.norm(d);
        let sc = t.scale(sc, 1.0 / ref2.sqrt());
        let lm = t.add(logs[0], logs[1])?;
        let lm = t.scale(lm, 1.0 / n);
        let term = t.add(sc, lm)?;
        total = Some(match total {
            Some(acc) => t.add(acc, term)?,
            None => term,
        });
    }
    total.ok_or_else(|| NfsError::contract("no MRSTFT resolutions"))
}

/// Weighted training objective on the tape.
pub fn composite_tape(t: &mut Tape, est: [Var; 2], target: &AudioBuffer, cfg: &LossConfig) -> Result<TapeLoss> {
    check_stereo(target)?;
    for &x in &est {
        if t.shape(x) != [target.len()] {
            return Err(NfsError::contract(format!(
                "estimate shape {:?} vs target length {}",
                t.shape(x),
                target.len()
            )));
        }
    }
    let w = cfg.weights;
    let l2 = l2_tape(t, est, target)?;
    let phase = phase_tape(t, est, target, &cfg.aux, cfg.phase_floor)?;
    let iid = iid_tape(t, est, target, &cfg.aux)?;
    let stft = mrstft_tape(t, est, target, &cfg.mrstft)?;
    let mut total = t.scale(l2, w.l2);
    for (v, k) in [(phase, w.phase), (iid, w.iid), (stft, w.stft)] {
        let s = t.scale(v, k);
        total = t.add(total, s)?;
    }
    Ok(TapeLoss { total, l2, phase, iid, stft })
}
