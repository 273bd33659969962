//! The conditioning network and the Fourier-domain renderer built on it.
//!
//! Per ear, poses are encoded, fused by cross-attention and fed to a Scaler
//! and a Shifter head. Their outputs become per-channel spectral scales `sigma`
//! and delays `phi`, which shift-and-scale the frame spectrum before a
//! positive channel mix, an inverse transform and weighted overlap-add.

mod config;
mod encoding;
mod layers;

use nfs_gradcore::{fft, kernels, Checkpoint, ParamId, ParamStore, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dsp::{self, AudioBuffer, FramePlan};
use crate::error::{NfsError, Result};

pub use config::{Ablation, DelayUnit, NfsConfig};
pub use encoding::{check_quaternion, encode_poses, sinusoidal, Pose, QUAT_TOL};

use layers::{Builder, ChannelLinear, Encoder, HeadBody};

pub const EARS: [&str; 2] = ["left", "right"];

/// Frames rendered per tape when rendering without gradients.
const RENDER_CHUNK: usize = 4;

/// Per-frame conditioning: the source pose and the geometric delay to each ear.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameConditions {
    pub poses: Vec<Pose>,
    /// Delay in samples, `[left, right]`, one value per frame.
    pub g: [Vec<f64>; 2],
}

impl FrameConditions {
    /// Computes straight-path delays from the poses.
    pub fn from_poses(poses: Vec<Pose>, cfg: &NfsConfig) -> Result<Self> {
        let ears = dsp::ear_positions(cfg.ear_offset);
        let mut g = [Vec::with_capacity(poses.len()), Vec::with_capacity(poses.len())];
        for (f, p) in poses.iter().enumerate() {
            for (e, ear) in ears.iter().enumerate() {
                let d = dsp::geometric_delay(p.position, *ear, cfg.speed_of_sound, cfg.sample_rate as f64)?;
                if d.clamped {
                    log::warn!("frame {f}: source within {} m of the {} ear, distance clamped", dsp::MIN_DISTANCE, EARS[e]);
                }
                g[e].push(d.samples);
            }
        }
        Ok(Self { poses, g })
    }

    /// Uses externally supplied delays instead of the geometric ones.
    pub fn with_g(poses: Vec<Pose>, g: [Vec<f64>; 2]) -> Result<Self> {
        if g.iter().any(|v| v.len() != poses.len()) {
            return Err(NfsError::contract(format!(
                "{} poses but {}/{} delays",
                poses.len(),
                g[0].len(),
                g[1].len()
            )));
        }
        if let Some(bad) = g.iter().flatten().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(NfsError::contract(format!("geometric delay {bad} must be finite and >= 0")));
        }
        Ok(Self { poses, g })
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        Self {
            poses: self.poses[range.clone()].to_vec(),
            g: [self.g[0][range.clone()].to_vec(), self.g[1][range].to_vec()],
        }
    }
}

/// Tape handles for one ear's activated head outputs.
#[derive(Clone, Copy, Debug)]
pub struct EarConditioning {
    /// `[F, chan, freq]`, strictly positive.
    pub sigma: Var,
    /// `[F, chan, freq]`, or `[F, 1, 1]` without a Shifter.
    pub phi: Var,
}

#[derive(Clone, Debug)]
struct Head {
    body: HeadBody,
    out: ChannelLinear,
}

#[derive(Clone, Debug)]
struct Trunk {
    pos_enc: Encoder,
    ori_enc: Encoder,
    scaler: HeadBody,
    shifter: Option<HeadBody>,
}

#[derive(Clone, Debug)]
struct EarNet {
    pos_enc: Encoder,
    ori_enc: Encoder,
    scaler: Head,
    shifter: Option<Head>,
    mixer: ParamId,
    ni: ParamId,
}

/// Parameter and compute totals.
#[derive(Clone, Debug, PartialEq)]
pub struct Capacity {
    /// Parameter count per block, in construction order.
    pub blocks: Vec<(String, usize)>,
    pub params: usize,
    /// Multiply-accumulates per rendered second, per stage, both ears.
    pub mac_blocks: Vec<(String, f64)>,
    pub macs_per_second: f64,
}

/// Dominant-channel summary for one ear at one probe position.
///
/// Channels are ranked by their mixed intensity `w_c * mean(sigma_c)`;
/// `sigma` and `phi` are the raw frequency means of the chosen channel and
/// `gain` is the mixed intensity summed over channels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeEar {
    pub channel: usize,
    pub sigma: f64,
    pub phi: f64,
    pub intensity: f64,
    pub gain: f64,
    pub g: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeRow {
    pub position: [f64; 3],
    pub ears: [ProbeEar; 2],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RenderOptions {
    /// Add the learned noise floor.
    pub noise: bool,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct NfsModel {
    config: NfsConfig,
    params: ParamStore,
    ears: [EarNet; 2],
    seed: u64,
}

fn build_trunk(bd: &mut Builder, cfg: &NfsConfig, prefix: &str) -> Result<Trunk> {
    let lff = cfg.ablation.lff.then_some((cfg.lff_features, cfg.lff_scale));
    Ok(Trunk {
        pos_enc: Encoder::new(bd, &format!("{prefix}.pos_enc"), cfg.embed_dim, lff)?,
        ori_enc: Encoder::new(bd, &format!("{prefix}.ori_enc"), cfg.embed_dim, lff)?,
        scaler: HeadBody::new(bd, &format!("{prefix}.scaler"), cfg)?,
        shifter: if cfg.ablation.shifter {
            Some(HeadBody::new(bd, &format!("{prefix}.shifter"), cfg)?)
        } else {
            None
        },
    })
}

fn build_ear(bd: &mut Builder, cfg: &NfsConfig, ear: &str, trunk: Trunk) -> Result<EarNet> {
    let scaler = Head {
        body: trunk.scaler,
        out: ChannelLinear::new(bd, &format!("{ear}.scaler.out"), cfg.chan, Some(0.0))?,
    };
    let shifter = match trunk.shifter {
        Some(body) => Some(Head {
            body,
            out: ChannelLinear::new(bd, &format!("{ear}.shifter.out"), cfg.chan, Some(cfg.shifter_bias_init))?,
        }),
        None => None,
    };
    // softplus(raw) = 1 / chan, so the initial mix is a channel average.
    let mix = (1.0 / cfg.chan as f64).exp_m1().ln();
    Ok(EarNet {
        pos_enc: trunk.pos_enc,
        ori_enc: trunk.ori_enc,
        scaler,
        shifter,
        mixer: bd.constant(format!("{ear}.mixer"), &[cfg.chan, 1], mix)?,
        ni: bd.constant(format!("{ear}.ni"), &[1], cfg.ni_init)?,
    })
}

/// Deterministic 64-bit mixing of several keys (SplitMix64 finalizer).
pub fn mix_seed(keys: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &k in keys {
        h ^= k;
        h = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

/// `phi = sigmoid(shifter_raw) * bound + g` and `sigma = softplus(scaler_raw) / (phi / unit)^2`.
///
/// `g` is `[F, 1, 1]` in samples and is ignored without GeoWarp. Without a
/// Shifter, `phi` is `g` itself. `phi` is floored at one sample before the
/// division.
pub fn activate_and_bias(
    t: &mut Tape,
    cfg: &NfsConfig,
    scaler_raw: Var,
    shifter_raw: Option<Var>,
    g: Var,
) -> Result<(Var, Var)> {
    let g = if cfg.ablation.geowarp {
        g
    } else {
        let shape = t.shape(g).to_vec();
        t.constant(Tensor::zeros(shape))
    };
    let phi = match shifter_raw {
        Some(raw) => {
            let s = t.sigmoid(raw);
            let s = t.scale(s, cfg.shift_bound());
            t.add(s, g)?
        }
        None => g,
    };
    let vs = t.softplus(scaler_raw);
    let d = t.clamp_min(phi, 1.0);
    let d = t.scale(d, 1.0 / cfg.unit_samples());
    let d2 = t.mul(d, d)?;
    let sigma = t.div(vs, d2)?;
    Ok((sigma, phi))
}

impl NfsModel {
    pub fn new(config: NfsConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bd = Builder { store: &mut params, rng: &mut rng };
        let ears = if config.shared_trunk {
            let trunk = build_trunk(&mut bd, &config, "trunk")?;
            [
                build_ear(&mut bd, &config, EARS[0], trunk.clone())?,
                build_ear(&mut bd, &config, EARS[1], trunk)?,
            ]
        } else {
            let left = build_trunk(&mut bd, &config, EARS[0])?;
            let left = build_ear(&mut bd, &config, EARS[0], left)?;
            let right = build_trunk(&mut bd, &config, EARS[1])?;
            let right = build_ear(&mut bd, &config, EARS[1], right)?;
            [left, right]
        };
        Ok(Self { config, params, ears, seed })
    }

    pub fn config(&self) -> &NfsConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint { params: self.params.clone(), config: self.config.to_toml(), seed: self.seed }
    }

    /// Rebuilds the architecture from the stored config and loads the stored
    /// values, which must match it name for name and shape for shape.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = NfsConfig::from_toml(&ckpt.config)?;
        let mut model = Self::new(config, ckpt.seed)?;
        if ckpt.params.len() != model.params.len() {
            return Err(NfsError::contract(format!(
                "checkpoint holds {} parameters, architecture needs {}",
                ckpt.params.len(),
                model.params.len()
            )));
        }
        for (i, (name, value)) in ckpt.params.iter().enumerate() {
            let expected = model.params.name(ParamId(i));
            let slot = model.params.get(ParamId(i));
            if name != expected || value.shape() != slot.shape() {
                return Err(NfsError::contract(format!(
                    "checkpoint parameter {name} {:?} does not match {expected} {:?}",
                    value.shape(),
                    slot.shape()
                )));
            }
            *model.params.get_mut(ParamId(i)) = value.clone();
        }
        Ok(model)
    }

    /// Records the parameters on `t`, trainable or frozen.
    pub fn bind(&self, t: &mut Tape, trainable: bool) -> Vec<Var> {
        if trainable {
            self.params.bind(t)
        } else {
            self.params.bind_frozen(t)
        }
    }

    /// Effective (softplus) mixer weights for one ear.
    pub fn mixer_weights(&self, ear: usize) -> Vec<f64> {
        self.params.get(self.ears[ear].mixer).data().iter().map(|&r| kernels::softplus(r)).collect()
    }

    pub fn noise_level(&self, ear: usize) -> f64 {
        kernels::softplus(self.params.get(self.ears[ear].ni).data()[0])
    }

    fn head_raw(&self, t: &mut Tape, v: &[Var], body_out: Var, out: &ChannelLinear) -> Result<Var> {
        let x = t.interp(body_out, self.config.freq())?;
        out.forward(t, v, x)
    }

    /// Activated Scaler/Shifter outputs for both ears. The audio is never read.
    pub fn condition(&self, t: &mut Tape, v: &[Var], cond: &FrameConditions) -> Result<[EarConditioning; 2]> {
        let cfg = &self.config;
        let frames = cond.len();
        if frames == 0 {
            return Err(NfsError::contract("no frames to condition"));
        }
        let (pos, ori) = encode_poses(&cond.poses, cfg.embed_dim)?;
        let pos = t.constant(Tensor::new([frames, cfg.embed_dim], pos)?);
        let ori = t.constant(Tensor::new([frames, cfg.embed_dim], ori)?);

        let mut shared: Option<(Var, Option<Var>)> = None;
        let mut result = Vec::with_capacity(2);
        for (e, ear) in self.ears.iter().enumerate() {
            let bodies = match shared {
                Some(b) if cfg.shared_trunk => b,
                _ => {
                    let pe = ear.pos_enc.forward(t, v, pos)?;
                    let oe = ear.ori_enc.forward(t, v, ori)?;
                    let s = ear.scaler.body.forward(t, v, pe, oe)?;
                    let h = match &ear.shifter {
                        Some(head) => Some(head.body.forward(t, v, pe, oe)?),
                        None => None,
                    };
                    shared = Some((s, h));
                    (s, h)
                }
            };
            let scaler_raw = self.head_raw(t, v, bodies.0, &ear.scaler.out)?;
            let shifter_raw = match (&ear.shifter, bodies.1) {
                (Some(head), Some(b)) => Some(self.head_raw(t, v, b, &head.out)?),
                _ => None,
            };
            let g = t.constant(Tensor::new([frames, 1, 1], cond.g[e].clone())?);
            let (sigma, phi) = activate_and_bias(t, cfg, scaler_raw, shifter_raw, g)?;
            result.push(EarConditioning { sigma, phi });
        }
        Ok([result[0], result[1]])
    }

    /// Shift-scale, channel mix and inverse transform for one ear:
    /// `spec: [F, 2 * freq]` packed `[re | im]` to frames `[F, N]`.
    /// `noise`, when given, is a standard normal `[F, N]` draw scaled by the
    /// learned level.
    pub fn synthesize(
        &self,
        t: &mut Tape,
        v: &[Var],
        ear: usize,
        spec: Var,
        c: EarConditioning,
        noise: Option<Tensor>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let (n, freq) = (cfg.frame_len, cfg.freq());
        let frames = t.shape(spec)[0];
        let omega = t.constant(Tensor::vector((0..freq).map(|k| dsp::omega(k, n)).collect()));
        let th = t.mul(c.phi, omega)?;
        let cos = t.cos(th);
        let sin = t.sin(th);
        let raw_w = v[self.ears[ear].mixer.0];
        let w = t.softplus(raw_w);
        let ws = t.mul(c.sigma, w)?;
        let hr = t.mul(ws, cos)?;
        let hr = t.sum_axis(hr, 1)?;
        let hr = t.reshape(hr, [frames, freq])?;
        let hi = t.mul(ws, sin)?;
        let hi = t.sum_axis(hi, 1)?;
        let hi = t.reshape(hi, [frames, freq])?;
        let hi = t.neg(hi);
        let xr = t.slice(spec, 1, 0, freq)?;
        let xi = t.slice(spec, 1, freq, freq)?;
        let a = t.mul(hr, xr)?;
        let b = t.mul(hi, xi)?;
        let yr = t.sub(a, b)?;
        let a = t.mul(hr, xi)?;
        let b = t.mul(hi, xr)?;
        let yi = t.add(a, b)?;
        let y = t.concat(&[yr, yi], 1)?;
        let mut out = t.irfft(y, n)?;
        if let Some(z) = noise {
            let level = t.softplus(v[self.ears[ear].ni.0]);
            let z = t.constant(z);
            let z = t.mul(z, level)?;
            out = t.add(out, z)?;
        }
        Ok(out)
    }

    fn check_frames(&self, mono_len: usize, cond: &FrameConditions) -> Result<FramePlan> {
        let plan = self.config.plan()?;
        let frames = plan.num_frames(mono_len)?;
        if frames != cond.len() {
            return Err(NfsError::contract(format!(
                "{mono_len} samples give {frames} frames but {} poses were supplied",
                cond.len()
            )));
        }
        Ok(plan)
    }

    /// Differentiable render of one mono crop to `[left, right]` waveforms of
    /// the same length, with WOLA recorded on the tape. `noise_seed` enables
    /// noise injection when the config keeps the NI module.
    pub fn render_item(
        &self,
        t: &mut Tape,
        v: &[Var],
        mono: &[f64],
        cond: &FrameConditions,
        noise_seed: Option<u64>,
    ) -> Result<[Var; 2]> {
        let plan = self.check_frames(mono.len(), cond)?;
        let frames = dsp::unfold(mono, &plan)?;
        let f = frames.shape()[0];
        let n = plan.frame_len;
        let spec = Tensor::new([f, 2 * plan.freq_bins()], fft::rfft_rows(frames.data(), n))?;
        let spec = t.constant(spec);
        let conds = self.condition(t, v, cond)?;
        let window = t.constant(Tensor::vector(plan.window().to_vec()));
        let inv_env = t.constant(Tensor::vector(plan.inverse_envelope(f)));
        let mut out = Vec::with_capacity(2);
        for (e, c) in conds.into_iter().enumerate() {
            let noise = match noise_seed {
                Some(seed) if self.config.ablation.ni => {
                    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, e as u64]));
                    Some(Tensor::new([f, n], dsp::gaussian(f * n, &mut rng))?)
                }
                _ => None,
            };
            let y = self.synthesize(t, v, e, spec, c, noise)?;
            let y = t.mul(y, window)?;
            let y = t.overlap_add(y, plan.hop)?;
            let y = t.mul(y, inv_env)?;
            out.push(t.slice(y, 0, plan.pad, mono.len())?);
        }
        Ok([out[0], out[1]])
    }

    /// Renders mono audio to stereo without recording gradients. Frames are
    /// processed in small chunks; noise, when enabled, is drawn per frame from
    /// `(seed, ear, frame)` so the result does not depend on chunking.
    pub fn render(&self, mono: &AudioBuffer, cond: &FrameConditions, opts: RenderOptions) -> Result<AudioBuffer> {
        if mono.num_channels() != 1 {
            return Err(NfsError::contract(format!("render needs mono input, got {} channels", mono.num_channels())));
        }
        if mono.sample_rate != self.config.sample_rate {
            return Err(NfsError::contract(format!(
                "input rate {} Hz, model expects {} Hz",
                mono.sample_rate, self.config.sample_rate
            )));
        }
        let x = mono.channel(0);
        let plan = self.check_frames(x.len(), cond)?;
        let frames = dsp::unfold(x, &plan)?;
        let (f, n) = (frames.shape()[0], plan.frame_len);
        let mut ears = [vec![0.0; f * n], vec![0.0; f * n]];
        for start in (0..f).step_by(RENDER_CHUNK) {
            let end = (start + RENDER_CHUNK).min(f);
            let mut t = Tape::new();
            let v = self.bind(&mut t, false);
            let spec = fft::rfft_rows(&frames.data()[start * n..end * n], n);
            let spec = t.constant(Tensor::new([end - start, 2 * plan.freq_bins()], spec)?);
            let conds = self.condition(&mut t, &v, &cond.slice(start..end))?;
            for (e, c) in conds.into_iter().enumerate() {
                let y = self.synthesize(&mut t, &v, e, spec, c, None)?;
                ears[e][start * n..end * n].copy_from_slice(t.value(y).data());
            }
        }
        let mut out = Vec::with_capacity(2);
        for (e, data) in ears.into_iter().enumerate() {
            let mut data = data;
            if opts.noise {
                let level = self.noise_level(e);
                for (fi, frame) in data.chunks_exact_mut(n).enumerate() {
                    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[opts.seed, e as u64, fi as u64]));
                    dsp::noise_injection(frame, level, &mut rng)?;
                }
            }
            let frames = Tensor::new([f, n], data)?;
            out.push(dsp::wola_fold(&frames, &plan, Some(x.len()))?);
        }
        let right = out.pop().unwrap();
        let left = out.pop().unwrap();
        AudioBuffer::stereo(left, right, mono.sample_rate)
    }

    /// Plain `(sigma, phi)` per ear, both `[F, chan, freq]` (`phi` broadcast
    /// when there is no Shifter).
    pub fn sigma_phi(&self, cond: &FrameConditions) -> Result<[(Tensor, Tensor); 2]> {
        let (chan, freq) = (self.config.chan, self.config.freq());
        let mut out: [(Vec<f64>, Vec<f64>); 2] = Default::default();
        for start in (0..cond.len()).step_by(RENDER_CHUNK) {
            let end = (start + RENDER_CHUNK).min(cond.len());
            let mut t = Tape::new();
            let v = self.bind(&mut t, false);
            let conds = self.condition(&mut t, &v, &cond.slice(start..end))?;
            for (e, c) in conds.into_iter().enumerate() {
                out[e].0.extend_from_slice(t.value(c.sigma).data());
                let phi = t.value(c.phi);
                if phi.shape()[1] == chan {
                    out[e].1.extend_from_slice(phi.data());
                } else {
                    for &p in phi.data() {
                        out[e].1.extend(std::iter::repeat_n(p, chan * freq));
                    }
                }
            }
        }
        let shape = [cond.len(), chan, freq];
        let [l, r] = out;
        Ok([
            (Tensor::new(shape, l.0)?, Tensor::new(shape, l.1)?),
            (Tensor::new(shape, r.0)?, Tensor::new(shape, r.1)?),
        ])
    }

    /// For each position (at orientation `quat`) and ear, the channel with the
    /// largest frequency-averaged `sigma`, with its mean `sigma` and mean `phi`.
    pub fn probe(&self, positions: &[[f64; 3]], quat: [f64; 4]) -> Result<Vec<ProbeRow>> {
        if positions.is_empty() {
            return Err(NfsError::contract("probe range is empty"));
        }
        let poses = positions.iter().map(|&position| Pose { position, quat }).collect();
        let cond = FrameConditions::from_poses(poses, &self.config)?;
        let sp = self.sigma_phi(&cond)?;
        let (chan, freq) = (self.config.chan, self.config.freq());
        let weights = [self.mixer_weights(0), self.mixer_weights(1)];
        let mut rows = Vec::with_capacity(positions.len());
        for (f, &position) in positions.iter().enumerate() {
            let mut ears = [ProbeEar { channel: 0, sigma: 0.0, phi: 0.0, intensity: 0.0, gain: 0.0, g: 0.0 }; 2];
            for (e, (sigma, phi)) in sp.iter().enumerate() {
                let mean = |t: &Tensor, c: usize| {
                    let o = (f * chan + c) * freq;
                    t.data()[o..o + freq].iter().sum::<f64>() / freq as f64
                };
                let level: Vec<f64> = (0..chan).map(|c| weights[e][c] * mean(sigma, c)).collect();
                let channel = (0..chan).max_by(|&a, &b| level[a].total_cmp(&level[b])).unwrap_or(0);
                ears[e] = ProbeEar {
                    channel,
                    sigma: mean(sigma, channel),
                    phi: mean(phi, channel),
                    intensity: level[channel],
                    gain: level.iter().sum(),
                    g: cond.g[e][f],
                };
            }
            rows.push(ProbeRow { position, ears });
        }
        Ok(rows)
    }

    /// Parameter tally by block and analytic multiply-accumulates per second
    /// of audio at `sample_rate / hop` frames per second, both ears.
    pub fn count(&self) -> Capacity {
        let mut blocks: Vec<(String, usize)> = Vec::new();
        for (name, value) in self.params.iter() {
            let parts: Vec<&str> = name.split('.').collect();
            let key = match parts.len() {
                0..=2 => name.to_string(),
                3 => parts[..2].join("."),
                _ => parts[..3].join("."),
            };
            match blocks.last_mut() {
                Some((k, n)) if *k == key => *n += value.len(),
                _ => blocks.push((key, value.len())),
            }
        }
        let params = blocks.iter().map(|(_, n)| n).sum();

        let cfg = &self.config;
        let (chan, freq, n) = (cfg.chan as u64, cfg.freq() as u64, cfg.frame_len as u64);
        let fps = cfg.sample_rate as f64 / cfg.hop as f64;
        let fft_macs = 2 * n * (n as f64).log2().ceil() as u64;
        let mut stages: Vec<(String, u64)> = Vec::new();
        let mut add = |name: &str, macs: u64| match stages.iter_mut().find(|(k, _)| k == name) {
            Some((_, m)) => *m += macs,
            None => stages.push((name.to_string(), macs)),
        };
        add("analysis_fft", fft_macs);
        for ear in &self.ears {
            add("encoders", ear.pos_enc.macs() + ear.ori_enc.macs());
            for head in std::iter::once(&ear.scaler).chain(ear.shifter.as_ref()) {
                add("head_bodies", head.body.macs(cfg.chan, cfg.embed_dim));
                add("interpolation", chan * freq);
                add("output_linear", chan * chan * freq);
            }
            // Scale by mixer weight, then accumulate cos and sin parts.
            add("shift_scale_mix", 3 * chan * freq);
            add("spectral_product", 4 * freq);
            add("synthesis_fft", fft_macs);
            add("wola", 2 * n);
        }
        let mac_blocks: Vec<(String, f64)> = stages.into_iter().map(|(k, m)| (k, m as f64 * fps)).collect();
        let macs_per_second = mac_blocks.iter().map(|(_, m)| m).sum();
        Capacity { blocks, params, mac_blocks, macs_per_second }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn static_cond(cfg: &NfsConfig, frames: usize, pos: [f64; 3]) -> FrameConditions {
        FrameConditions::from_poses(vec![Pose::at(pos); frames], cfg).unwrap()
    }

    #[test]
    fn default_capacity_near_reference() {
        let m = NfsModel::new(NfsConfig::default(), 0).unwrap();
        let c = m.count();
        assert_eq!(c.params, m.params().numel());
        assert!((385_000..=715_000).contains(&c.params), "{}", c.params);
        assert!(c.macs_per_second > 1.7e9 && c.macs_per_second < 6.8e9, "{}", c.macs_per_second);
    }

    #[test]
    fn shifter_ablation_drops_shifter_parameters() {
        let mut cfg = NfsConfig::tiny();
        cfg.ablation.shifter = false;
        let m = NfsModel::new(cfg, 0).unwrap();
        assert!(m.params().iter().all(|(n, _)| !n.contains("shifter")));
    }

    #[test]
    fn shared_trunk_has_fewer_parameters() {
        let mut cfg = NfsConfig::tiny();
        let full = NfsModel::new(cfg.clone(), 0).unwrap().count().params;
        cfg.shared_trunk = true;
        let shared = NfsModel::new(cfg, 0).unwrap();
        assert!(shared.count().params < full);
        assert!(shared.params().id("trunk.scaler.se.fc1.w").is_some());
        assert!(shared.params().id("right.mixer").is_some());
    }

    #[test]
    fn activation_examples() {
        let mut cfg = NfsConfig::default();
        cfg.delay_unit = DelayUnit::Samples;
        let mut t = Tape::new();
        let raw = t.constant(Tensor::zeros([1, 1, 1]));
        let g = t.constant(Tensor::full([1, 1, 1], 240.0));
        let (_, phi) = activate_and_bias(&mut t, &cfg, raw, Some(raw), g).unwrap();
        assert_eq!(t.value(phi).data()[0], 2640.0);

        cfg.ablation.shifter = false;
        let one = t.constant(Tensor::full([1, 1, 1], 1.0));
        let (sigma, _) = activate_and_bias(&mut t, &cfg, raw, None, one).unwrap();
        assert!((t.value(sigma).data()[0] - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn render_is_linear_and_silent_on_silence() {
        let cfg = NfsConfig::tiny();
        let m = NfsModel::new(cfg.clone(), 3).unwrap();
        let x: Vec<f64> = (0..200).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.5).collect();
        let plan = cfg.plan().unwrap();
        let cond = static_cond(&cfg, plan.num_frames(x.len()).unwrap(), [1.0, -0.5, 0.1]);
        let opts = RenderOptions { noise: false, seed: 0 };
        let y1 = m.render(&AudioBuffer::mono(x.clone(), cfg.sample_rate).unwrap(), &cond, opts).unwrap();
        let x2: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let y2 = m.render(&AudioBuffer::mono(x2, cfg.sample_rate).unwrap(), &cond, opts).unwrap();
        for ch in 0..2 {
            for (a, b) in y1.channel(ch).iter().zip(y2.channel(ch)) {
                assert!((2.0 * a - b).abs() < 1e-12);
            }
        }
        let z = m.render(&AudioBuffer::mono(vec![0.0; 200], cfg.sample_rate).unwrap(), &cond, opts).unwrap();
        assert!(z.channel(0).iter().chain(z.channel(1)).all(|v| *v == 0.0));
    }

    #[test]
    fn tape_render_matches_plain_render() {
        let cfg = NfsConfig::tiny();
        let m = NfsModel::new(cfg.clone(), 5).unwrap();
        let x: Vec<f64> = (0..150).map(|i| (i as f64 * 0.37).sin()).collect();
        let plan = cfg.plan().unwrap();
        let cond = static_cond(&cfg, plan.num_frames(x.len()).unwrap(), [0.4, 0.8, 0.0]);
        let plain = m
            .render(&AudioBuffer::mono(x.clone(), cfg.sample_rate).unwrap(), &cond, RenderOptions { noise: false, seed: 0 })
            .unwrap();
        let mut t = Tape::new();
        let v = m.bind(&mut t, false);
        let [l, r] = m.render_item(&mut t, &v, &x, &cond, None).unwrap();
        for (ch, var) in [(0, l), (1, r)] {
            for (a, b) in plain.channel(ch).iter().zip(t.value(var).data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_rebuilds_model() {
        let m = NfsModel::new(NfsConfig::tiny(), 11).unwrap();
        let back = NfsModel::from_checkpoint(&m.to_checkpoint()).unwrap();
        for ((n1, a), (n2, b)) in m.params().iter().zip(back.params().iter()) {
            assert_eq!(n1, n2);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn mix_seed_separates_keys() {
        assert_ne!(mix_seed(&[1, 0, 2]), mix_seed(&[1, 2, 0]));
        assert_eq!(mix_seed(&[4, 5]), mix_seed(&[4, 5]));
    }
}
