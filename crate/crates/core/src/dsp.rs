//! Framing, transforms, Fourier-domain shift/scale, geometric delay, WOLA
//! resynthesis, and WAV I/O. Everything here is a pure function of its inputs.

use std::f64::consts::PI;
use std::path::Path;

use nfs_gradcore::{fft, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{NfsError, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 48_000;
pub const SPEED_OF_SOUND: f64 = 343.0;
pub const EAR_OFFSET: f64 = 0.09;
/// Closest a source may get to an ear before the distance is clamped.
pub const MIN_DISTANCE: f64 = 0.01;

const COLA_TOL: f64 = 1e-9;
const ENVELOPE_FLOOR: f64 = 1e-12;

// ---------------------------------------------------------------------------
// Audio buffers and WAV files

#[derive(Clone, Debug, PartialEq)]
pub struct AudioBuffer {
    pub sample_rate: u32,
    channels: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleFormat {
    Pcm16,
    Pcm24,
    Float32,
}

impl AudioBuffer {
    pub fn mono(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        Self::from_channels(vec![samples], sample_rate)
    }

    pub fn stereo(left: Vec<f64>, right: Vec<f64>, sample_rate: u32) -> Result<Self> {
        Self::from_channels(vec![left, right], sample_rate)
    }

    pub fn from_channels(channels: Vec<Vec<f64>>, sample_rate: u32) -> Result<Self> {
        if channels.is_empty() || channels.len() > 2 {
            return Err(NfsError::contract(format!("{} channels; expected 1 or 2", channels.len())));
        }
        if channels.iter().any(|c| c.len() != channels[0].len()) {
            return Err(NfsError::contract("stereo channels differ in length"));
        }
        if channels.iter().flatten().any(|v| !v.is_finite()) {
            return Err(NfsError::contract("audio contains non-finite samples"));
        }
        Ok(Self { sample_rate, channels })
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channel(&self, i: usize) -> &[f64] {
        &self.channels[i]
    }

    pub fn into_channels(self) -> Vec<Vec<f64>> {
        self.channels
    }

    pub fn read_wav(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut reader = hound::WavReader::open(path)
            .map_err(|e| NfsError::ingestion(path, format!("cannot read wav: {e}")))?;
        let spec = reader.spec();
        let n_ch = spec.channels as usize;
        if n_ch == 0 || n_ch > 2 {
            return Err(NfsError::ingestion(path, format!("{n_ch} channels; expected 1 or 2")));
        }
        let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
            (hound::SampleFormat::Float, 32) => {
                reader.samples::<f32>().map(|s| s.map(f64::from)).collect::<std::result::Result<_, _>>()?
            }
            (hound::SampleFormat::Int, bits @ (16 | 24)) => {
                let scale = (1i64 << (bits - 1)) as f64;
                reader
                    .samples::<i32>()
                    .map(|s| s.map(|v| v as f64 / scale))
                    .collect::<std::result::Result<_, _>>()?
            }
            (fmt, bits) => {
                return Err(NfsError::ingestion(path, format!("unsupported sample format {fmt:?}/{bits}-bit")));
            }
        };
        let mut channels = vec![Vec::with_capacity(interleaved.len() / n_ch); n_ch];
        for frame in interleaved.chunks_exact(n_ch) {
            for (c, v) in frame.iter().enumerate() {
                channels[c].push(*v);
            }
        }
        Self::from_channels(channels, spec.sample_rate).map_err(|e| NfsError::ingestion(path, e.to_string()))
    }

    /// Writes the buffer; PCM output is clipped to the representable range.
    pub fn write_wav(&self, path: impl AsRef<Path>, format: SampleFormat) -> Result<()> {
        let (bits, sample_format) = match format {
            SampleFormat::Pcm16 => (16, hound::SampleFormat::Int),
            SampleFormat::Pcm24 => (24, hound::SampleFormat::Int),
            SampleFormat::Float32 => (32, hound::SampleFormat::Float),
        };
        let spec = hound::WavSpec {
            channels: self.channels.len() as u16,
            sample_rate: self.sample_rate,
            bits_per_sample: bits,
            sample_format,
        };
        let mut w = hound::WavWriter::create(path, spec)?;
        for i in 0..self.len() {
            for ch in &self.channels {
                match format {
                    SampleFormat::Float32 => w.write_sample(ch[i] as f32)?,
                    _ => {
                        let scale = (1i64 << (bits - 1)) as f64;
                        let v = (ch[i] * scale).round().clamp(-scale, scale - 1.0) as i32;
                        w.write_sample(v)?
                    }
                }
            }
        }
        w.finalize()?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Frame plan

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    Hann,
    Rectangular,
}

/// Periodic Hann window `sin^2(pi n / N)`.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n).map(|i| (PI * i as f64 / n as f64).sin().powi(2)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct FramePlan {
    pub frame_len: usize,
    pub hop: usize,
    pub pad: usize,
    window: Vec<f64>,
}

impl FramePlan {
    pub fn new(frame_len: usize, hop: usize, pad: usize, window: Window) -> Result<Self> {
        if frame_len == 0 || hop == 0 || hop > frame_len {
            return Err(NfsError::contract(format!("invalid frame plan: frame {frame_len}, hop {hop}")));
        }
        if frame_len % hop != 0 {
            return Err(NfsError::contract(format!("hop {hop} does not divide frame length {frame_len}")));
        }
        let window = match window {
            Window::Hann => hann(frame_len),
            Window::Rectangular => vec![1.0; frame_len],
        };
        let plan = Self { frame_len, hop, pad, window };
        plan.check_cola()?;
        Ok(plan)
    }

    /// Hann synthesis window with padding `frame_len - hop`, so every input
    /// sample is covered by a full window envelope.
    pub fn hann(frame_len: usize, hop: usize) -> Result<Self> {
        Self::new(frame_len, hop, frame_len.saturating_sub(hop), Window::Hann)
    }

    fn check_cola(&self) -> Result<()> {
        let sums: Vec<f64> = (0..self.hop)
            .map(|n| (0..self.frame_len / self.hop).map(|m| self.window[n + m * self.hop]).sum())
            .collect();
        let mean = sums.iter().sum::<f64>() / sums.len() as f64;
        let worst = sums.iter().map(|s| (s - mean).abs()).fold(0.0, f64::max);
        if mean <= 0.0 || worst > COLA_TOL * mean {
            return Err(NfsError::contract(format!(
                "window violates COLA at hop {}: envelope ripple {worst:e}",
                self.hop
            )));
        }
        Ok(())
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    pub fn freq_bins(&self) -> usize {
        fft::half_len(self.frame_len)
    }

    /// Frames needed to cover `len` samples plus padding; a partial last hop
    /// is completed with zeros.
    pub fn num_frames(&self, len: usize) -> Result<usize> {
        let total = len + 2 * self.pad;
        if total < self.frame_len {
            return Err(NfsError::contract(format!(
                "{len} samples with padding {} shorter than one frame of {}",
                self.pad, self.frame_len
            )));
        }
        Ok((total - self.frame_len).div_ceil(self.hop) + 1)
    }

    /// Centre of frame `f` in unpadded sample time.
    pub fn frame_center(&self, f: usize) -> f64 {
        (f * self.hop) as f64 + self.frame_len as f64 / 2.0 - self.pad as f64
    }

    /// Length of the padded signal spanned by `frames` frames.
    pub fn span(&self, frames: usize) -> usize {
        (frames - 1) * self.hop + self.frame_len
    }

    /// Summed synthesis window over `frames` frames.
    pub fn envelope(&self, frames: usize) -> Vec<f64> {
        let mut env = vec![0.0; self.span(frames)];
        for f in 0..frames {
            for (e, w) in env[f * self.hop..].iter_mut().zip(&self.window) {
                *e += w;
            }
        }
        env
    }

    /// Reciprocal envelope with near-zero entries mapped to zero.
    pub fn inverse_envelope(&self, frames: usize) -> Vec<f64> {
        self.envelope(frames)
            .into_iter()
            .map(|e| if e < ENVELOPE_FLOOR { 0.0 } else { 1.0 / e })
            .collect()
    }
}

/// Zero-pads `audio` by `plan.pad` on each side and cuts `[num_frames, frame_len]` frames.
pub fn unfold(audio: &[f64], plan: &FramePlan) -> Result<Tensor> {
    let frames = plan.num_frames(audio.len())?;
    let n = plan.frame_len;
    let mut data = vec![0.0; frames * n];
    for f in 0..frames {
        let start = (f * plan.hop) as isize - plan.pad as isize;
        for (i, d) in data[f * n..(f + 1) * n].iter_mut().enumerate() {
            let t = start + i as isize;
            if t >= 0 && (t as usize) < audio.len() {
                *d = audio[t as usize];
            }
        }
    }
    Ok(Tensor::new([frames, n], data)?)
}

/// Windows, overlap-adds and envelope-normalizes `[num_frames, frame_len]`
/// frames, then trims the padding. `out_len` truncates to the original
/// signal length when given.
pub fn wola_fold(frames: &Tensor, plan: &FramePlan, out_len: Option<usize>) -> Result<Vec<f64>> {
    let s = frames.shape();
    if s.len() != 2 || s[1] != plan.frame_len || s[0] == 0 {
        return Err(NfsError::contract(format!(
            "wola_fold expects [frames, {}], got {s:?}",
            plan.frame_len
        )));
    }
    let (count, n) = (s[0], s[1]);
    let mut acc = vec![0.0; plan.span(count)];
    for (f, frame) in frames.data().chunks_exact(n).enumerate() {
        for ((a, x), w) in acc[f * plan.hop..].iter_mut().zip(frame).zip(&plan.window) {
            *a += x * w;
        }
    }
    for (a, inv) in acc.iter_mut().zip(plan.inverse_envelope(count)) {
        *a *= inv;
    }
    let available = acc.len().saturating_sub(2 * plan.pad);
    let len = out_len.unwrap_or(available);
    if len > acc.len() - plan.pad {
        return Err(NfsError::contract(format!("requested {len} samples from {count} frames")));
    }
    Ok(acc[plan.pad..plan.pad + len].to_vec())
}

// ---------------------------------------------------------------------------
// Spectra

/// Half spectrum of a real frame: bins `0..=N/2` as paired real planes.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    pub re: Vec<f64>,
    pub im: Vec<f64>,
    pub frame_len: usize,
}

impl Spectrum {
    pub fn bins(&self) -> usize {
        self.re.len()
    }
}

/// `X[k] = sum_m x[m] e^{-i w_k m}`, `w_k = 2 pi k / N`.
pub fn dft(frame: &[f64], frame_len: usize) -> Result<Spectrum> {
    if frame.len() != frame_len || frame_len == 0 {
        return Err(NfsError::contract(format!("frame of {} samples, plan expects {frame_len}", frame.len())));
    }
    let f = fft::half_len(frame_len);
    let packed = fft::rfft_rows(frame, frame_len);
    let mut im = packed[f..].to_vec();
    im[0] = 0.0;
    if frame_len % 2 == 0 {
        im[f - 1] = 0.0;
    }
    Ok(Spectrum { re: packed[..f].to_vec(), im, frame_len })
}

pub fn idft(spec: &Spectrum) -> Result<Vec<f64>> {
    let f = fft::half_len(spec.frame_len);
    if spec.re.len() != f || spec.im.len() != f {
        return Err(NfsError::contract(format!(
            "spectrum has {} bins, frame {} needs {f}",
            spec.re.len(),
            spec.frame_len
        )));
    }
    let mut packed = spec.re.clone();
    packed.extend_from_slice(&spec.im);
    Ok(fft::irfft_rows(&packed, spec.frame_len))
}

/// Angular frequency of half-spectrum bin `k` for frame length `n`.
pub fn omega(k: usize, n: usize) -> f64 {
    2.0 * PI * k as f64 / n as f64
}

/// Per-channel spectra `[chan, bins]` as paired planes.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiSpectrum {
    pub chan: usize,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
    pub frame_len: usize,
}

impl MultiSpectrum {
    pub fn channel(&self, c: usize) -> Spectrum {
        let f = self.re.len() / self.chan;
        Spectrum {
            re: self.re[c * f..(c + 1) * f].to_vec(),
            im: self.im[c * f..(c + 1) * f].to_vec(),
            frame_len: self.frame_len,
        }
    }
}

/// `out[c, k] = sigma[c, k] e^{-i w_k phi[c, k]} X[k]`, with `sigma`/`phi`
/// row-major `[chan, bins]` and `phi` in (fractional) samples.
pub fn apply_shift_scale(x: &Spectrum, sigma: &[f64], phi: &[f64], chan: usize) -> Result<MultiSpectrum> {
    let f = x.bins();
    if sigma.len() != chan * f || phi.len() != chan * f {
        return Err(NfsError::contract(format!(
            "sigma/phi of {}/{} values, expected {chan} x {f}",
            sigma.len(),
            phi.len()
        )));
    }
    if let Some(bad) = sigma.iter().find(|s| !(**s >= 0.0)) {
        return Err(NfsError::contract(format!("negative scale {bad}")));
    }
    if phi.iter().any(|p| !p.is_finite()) {
        return Err(NfsError::contract("non-finite phase delay"));
    }
    let n = x.frame_len;
    let mut re = vec![0.0; chan * f];
    let mut im = vec![0.0; chan * f];
    for c in 0..chan {
        for k in 0..f {
            let i = c * f + k;
            let th = omega(k, n) * phi[i];
            let (s, co) = th.sin_cos();
            // sigma (cos th - i sin th) (a + i b)
            let (a, b) = (x.re[k], x.im[k]);
            re[i] = sigma[i] * (co * a + s * b);
            im[i] = sigma[i] * (co * b - s * a);
        }
    }
    Ok(MultiSpectrum { chan, re, im, frame_len: n })
}

// ---------------------------------------------------------------------------
// Geometry

/// Left and right ear positions: the head sits at the origin with the
/// lateral axis along `y`; the left ear is on the negative side.
pub fn ear_positions(offset: f64) -> [[f64; 3]; 2] {
    [[0.0, -offset, 0.0], [0.0, offset, 0.0]]
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeometricDelay {
    pub samples: f64,
    /// The source was closer than [`MIN_DISTANCE`] and the distance was clamped.
    pub clamped: bool,
}

/// Straight-path propagation delay `|pose - ear| fs / c` in samples.
pub fn geometric_delay(pose: [f64; 3], ear: [f64; 3], c: f64, fs: f64) -> Result<GeometricDelay> {
    if !(c > 0.0) || !(fs > 0.0) {
        return Err(NfsError::contract(format!("speed of sound {c} and rate {fs} must be positive")));
    }
    let d = pose.iter().zip(&ear).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let clamped = d < MIN_DISTANCE;
    Ok(GeometricDelay { samples: d.max(MIN_DISTANCE) * fs / c, clamped })
}

// ---------------------------------------------------------------------------
// Noise

/// Adds zero-mean Gaussian noise of standard deviation `level` in place.
pub fn noise_injection(frames: &mut [f64], level: f64, rng: &mut impl Rng) -> Result<()> {
    if !(level >= 0.0) {
        return Err(NfsError::contract(format!("noise level {level} must be >= 0")));
    }
    if level == 0.0 {
        return Ok(());
    }
    for v in frames.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v += level * z;
    }
    Ok(())
}

/// Standard normal draws, for noise that enters the differentiable path.
pub fn gaussian(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

// ---------------------------------------------------------------------------
// Short-time analysis

/// STFT layout: a Hann window of `win` samples centred in an `fft`-point
/// frame, frames every `hop` samples with no centre padding. Signals shorter
/// than one frame are zero-extended to a single frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct StftParams {
    pub fft: usize,
    pub hop: usize,
    pub win: usize,
}

impl StftParams {
    pub const fn new(fft: usize, hop: usize, win: usize) -> Self {
        Self { fft, hop, win }
    }

    pub fn validate(&self) -> Result<()> {
        if self.fft == 0 || self.hop == 0 || self.win == 0 || self.win > self.fft {
            return Err(NfsError::Config(format!("invalid STFT parameters {self:?}")));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        fft::half_len(self.fft)
    }

    pub fn frames(&self, len: usize) -> usize {
        if len <= self.fft {
            1
        } else {
            (len - self.fft) / self.hop + 1
        }
    }

    /// Length the signal is zero-extended to before framing.
    pub fn padded_len(&self, len: usize) -> usize {
        len.max(self.fft)
    }

    /// Analysis window zero-padded to `fft` points.
    pub fn window(&self) -> Vec<f64> {
        let mut w = vec![0.0; self.fft];
        let off = (self.fft - self.win) / 2;
        w[off..off + self.win].copy_from_slice(&hann(self.win));
        w
    }
}

/// Plain STFT of `x`: `(re, im)` planes, each `[frames, bins]` row-major.
pub fn stft(x: &[f64], p: &StftParams) -> (Vec<f64>, Vec<f64>) {
    let frames = p.frames(x.len());
    let f = p.bins();
    let w = p.window();
    let mut buf = vec![0.0; frames * p.fft];
    for m in 0..frames {
        for (i, b) in buf[m * p.fft..(m + 1) * p.fft].iter_mut().enumerate() {
            let t = m * p.hop + i;
            *b = if t < x.len() { x[t] * w[i] } else { 0.0 };
        }
    }
    let packed = fft::rfft_rows(&buf, p.fft);
    let mut re = Vec::with_capacity(frames * f);
    let mut im = Vec::with_capacity(frames * f);
    for row in packed.chunks_exact(2 * f) {
        re.extend_from_slice(&row[..f]);
        im.extend_from_slice(&row[f..]);
    }
    (re, im)
}

// ---------------------------------------------------------------------------
// Windowed-sinc fractional delay

/// Modified Bessel function of the first kind, order zero (power series).
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..200 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

/// Kaiser-windowed sinc interpolator with `half` taps on each side.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SincKernel {
    pub half: usize,
    pub beta: f64,
}

impl Default for SincKernel {
    fn default() -> Self {
        Self { half: 48, beta: 9.0 }
    }
}

impl SincKernel {
    fn tap(&self, u: f64) -> f64 {
        let r = u / self.half as f64;
        if r.abs() >= 1.0 {
            return 0.0;
        }
        let sinc = if u == 0.0 { 1.0 } else { (PI * u).sin() / (PI * u) };
        sinc * bessel_i0(self.beta * (1.0 - r * r).sqrt()) / bessel_i0(self.beta)
    }

    /// Weights for samples `floor(t) - half + 1 ..= floor(t) + half`, which
    /// depend only on the fractional part `frac` of `t`.
    fn taps(&self, frac: f64) -> Vec<f64> {
        let h = self.half as f64;
        (0..2 * self.half).map(|j| self.tap(frac + h - 1.0 - j as f64)).collect()
    }

    fn apply(&self, x: &[f64], base: i64, taps: &[f64]) -> f64 {
        let lo = base - self.half as i64 + 1;
        let mut acc = 0.0;
        for (j, w) in taps.iter().enumerate() {
            let n = lo + j as i64;
            if n >= 0 && (n as usize) < x.len() {
                acc += x[n as usize] * w;
            }
        }
        acc
    }

    /// Value of the band-limited reconstruction of `x` at fractional time `t`;
    /// samples outside `x` are zero.
    pub fn sample_at(&self, x: &[f64], t: f64) -> f64 {
        let base = t.floor();
        self.apply(x, base as i64, &self.taps(t - base))
    }

    /// `y[t] = gain(t) * x(t - delay(t))` for a time-varying delay in samples.
    pub fn delay_line(
        &self,
        x: &[f64],
        delay: impl Fn(usize) -> f64,
        gain: impl Fn(usize) -> f64,
    ) -> Vec<f64> {
        let mut cached: Option<(u64, Vec<f64>)> = None;
        (0..x.len())
            .map(|t| {
                let pos = t as f64 - delay(t);
                let base = pos.floor();
                let frac = pos - base;
                if cached.as_ref().is_none_or(|(bits, _)| *bits != frac.to_bits()) {
                    cached = Some((frac.to_bits(), self.taps(frac)));
                }
                let taps = &cached.as_ref().expect("taps cached above").1;
                gain(t) * self.apply(x, base as i64, taps)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;

    #[test]
    fn impulse_and_dc_spectra() {
        let s = dft(&[1.0, 0.0, 0.0, 0.0], 4).unwrap();
        assert_eq!(s.re, vec![1.0, 1.0, 1.0]);
        assert!(s.im.iter().all(|v| *v == 0.0));
        let s = dft(&[1.0; 4], 4).unwrap();
        assert_eq!(s.re, vec![4.0, 0.0, 0.0]);
        assert!(dft(&[1.0; 3], 4).is_err());
    }

    #[test]
    fn unfold_counts() {
        let plan = FramePlan::new(4, 2, 0, Window::Hann).unwrap();
        assert_eq!(unfold(&[0.0; 10], &plan).unwrap().shape(), &[4, 4]);
        let plan = FramePlan::hann(9600, 4800).unwrap();
        assert_eq!(plan.pad, 4800);
        assert_eq!(plan.num_frames(38_400).unwrap(), 9);
        assert!(FramePlan::new(9600, 3000, 0, Window::Hann).is_err());
    }

    #[test]
    fn unfold_constant_signal_is_zero_in_padding() {
        let plan = FramePlan::new(4, 2, 2, Window::Hann).unwrap();
        let fr = unfold(&[1.0; 6], &plan).unwrap();
        assert_eq!(&fr.data()[..4], &[0.0, 0.0, 1.0, 1.0]);
        assert_eq!(&fr.data()[4..8], &[1.0; 4]);
    }

    #[test]
    fn single_rectangular_frame_passes_through() {
        let plan = FramePlan::new(5, 5, 0, Window::Rectangular).unwrap();
        let fr = Tensor::new([1, 5], vec![1.0, -2.0, 3.0, 0.5, 0.25]).unwrap();
        assert_eq!(wola_fold(&fr, &plan, None).unwrap(), fr.data());
    }

    #[test]
    fn quarter_turn_phase_factor() {
        // N = 4, k = 1, delta = 1 gives e^{-i pi / 2} = -i.
        let x = Spectrum { re: vec![0.0, 1.0, 0.0], im: vec![0.0; 3], frame_len: 4 };
        let out = apply_shift_scale(&x, &[1.0; 3], &[1.0; 3], 1).unwrap();
        assert!(out.re[1].abs() < 1e-15);
        assert!((out.im[1] + 1.0).abs() < 1e-15);
        assert!(apply_shift_scale(&x, &[-1.0, 1.0, 1.0], &[0.0; 3], 1).is_err());
    }

    #[test]
    fn integer_shift_example() {
        let x = dft(&[1.0, 2.0, 3.0, 4.0], 4).unwrap();
        let out = apply_shift_scale(&x, &[1.0; 3], &[1.0; 3], 1).unwrap();
        let y = idft(&out.channel(0)).unwrap();
        for (a, b) in y.iter().zip([4.0, 1.0, 2.0, 3.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn delay_arithmetic() {
        let g = geometric_delay([1.715, 0.0, 0.0], [0.0; 3], 343.0, 48_000.0).unwrap();
        assert!((g.samples - 240.0).abs() < 1e-9);
        let g = geometric_delay([3.43, 0.0, 0.0], [0.0; 3], 343.0, 48_000.0).unwrap();
        assert!((g.samples - 480.0).abs() < 1e-9);
        let g = geometric_delay([0.0; 3], [0.0; 3], 343.0, 48_000.0).unwrap();
        assert!(g.clamped);
        assert!((g.samples - 0.01 * 48_000.0 / 343.0).abs() < 1e-12);
    }

    #[test]
    fn noise_level_zero_is_noop() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut f = vec![0.5; 8];
        noise_injection(&mut f, 0.0, &mut rng).unwrap();
        assert_eq!(f, vec![0.5; 8]);
        assert!(noise_injection(&mut f, -1.0, &mut rng).is_err());
    }

    #[test]
    fn bessel_reference_values() {
        assert_eq!(bessel_i0(0.0), 1.0);
        assert!((bessel_i0(1.0) - 1.266_065_877_752_008_4).abs() < 1e-15);
    }
}
