//! Paired mono/binaural records with pose tracks: ingestion, frame
//! alignment, random crops and a synthetic ground-truth generator.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dsp::{self, AudioBuffer, SampleFormat, SincKernel};
use crate::error::{NfsError, Result};
use crate::model::{FrameConditions, NfsConfig, Pose};

pub const POSE_RATE: f64 = 120.0;
/// Largest tolerated gap between consecutive pose rows, in rows.
pub const MAX_GAP_ROWS: f64 = 3.0;
/// Quaternions further than this from unit norm are rejected.
pub const QUAT_RENORM_TOL: f64 = 1e-3;
/// Environment variable naming the directory manifest paths are relative to.
pub const DATA_ROOT_ENV: &str = "NFS_DATA_ROOT";

const POSE_COLUMNS: [&str; 8] = ["t", "x", "y", "z", "qw", "qx", "qy", "qz"];

/// One row of a pose file. `g` carries optional precomputed per-ear delays
/// in samples.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseSample {
    pub t: f64,
    pub pose: Pose,
    pub g: Option<[f64; 2]>,
}

/// Time-stamped poses, strictly increasing in time.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseTrack {
    pub samples: Vec<PoseSample>,
}

/// A pose sampled at an arbitrary time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackPoint {
    pub pose: Pose,
    pub g: Option<[f64; 2]>,
    /// The time fell outside the track and the nearest endpoint was used.
    pub clamped: bool,
}

fn nlerp(a: [f64; 4], b: [f64; 4], u: f64) -> [f64; 4] {
    // Take the short way round.
    let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    let s = if dot < 0.0 { -1.0 } else { 1.0 };
    let mut q = [0.0; 4];
    for i in 0..4 {
        q[i] = (1.0 - u) * a[i] + u * s * b[i];
    }
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    q.map(|v| v / n)
}

fn lerp3(a: [f64; 3], b: [f64; 3], u: f64) -> [f64; 3] {
    [0, 1, 2].map(|i| a[i] + u * (b[i] - a[i]))
}

impl PoseTrack {
    /// Validates ordering, gaps and quaternion norms, renormalizing
    /// quaternions that are within tolerance of unit length. `source` names
    /// the origin in error messages.
    pub fn new(mut samples: Vec<PoseSample>, source: &Path) -> Result<Self> {
        if samples.is_empty() {
            return Err(NfsError::ingestion(source, "pose track is empty"));
        }
        let max_gap = MAX_GAP_ROWS / POSE_RATE + 1e-9;
        for (i, s) in samples.iter_mut().enumerate() {
            let row = i + 2;
            let vals = [s.t, s.pose.position[0], s.pose.position[1], s.pose.position[2]];
            if vals.iter().chain(&s.pose.quat).any(|v| !v.is_finite()) {
                return Err(NfsError::ingestion(source, format!("row {row}: non-finite value")));
            }
            let norm = s.pose.quat.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > QUAT_RENORM_TOL {
                return Err(NfsError::ingestion(source, format!("row {row}: quaternion norm {norm} is not unit")));
            }
            // Already-unit rows are kept as stored so files round-trip exactly.
            if (norm - 1.0).abs() > 1e-12 {
                s.pose.quat = s.pose.quat.map(|v| v / norm);
            }
            if let Some(g) = s.g {
                if g.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                    return Err(NfsError::ingestion(source, format!("row {row}: delay override {g:?} must be >= 0")));
                }
            }
        }
        for (i, w) in samples.windows(2).enumerate() {
            let dt = w[1].t - w[0].t;
            if !(dt > 0.0) {
                return Err(NfsError::ingestion(
                    source,
                    format!("row {}: timestamp {} not after {}", i + 3, w[1].t, w[0].t),
                ));
            }
            if dt > max_gap {
                return Err(NfsError::ingestion(
                    source,
                    format!("gap of {dt:.4} s between t = {} and t = {} (rows {} and {})", w[0].t, w[1].t, i + 2, i + 3),
                ));
            }
        }
        if samples.iter().any(|s| s.g.is_some()) && samples.iter().any(|s| s.g.is_none()) {
            return Err(NfsError::ingestion(source, "delay override present on some rows only"));
        }
        Ok(Self { samples })
    }

    /// A track holding `pose` from `0` to `seconds` at the pose rate.
    pub fn fixed(pose: Pose, seconds: f64) -> Self {
        Self::from_fn(seconds, |_| pose)
    }

    /// Samples `f(t)` from `0` through at least `seconds` at the pose rate.
    pub fn from_fn(seconds: f64, f: impl Fn(f64) -> Pose) -> Self {
        let rows = (seconds * POSE_RATE).ceil() as usize + 1;
        let samples = (0..rows)
            .map(|i| {
                let t = i as f64 / POSE_RATE;
                PoseSample { t, pose: f(t), g: None }
            })
            .collect();
        Self { samples }
    }

    pub fn start(&self) -> f64 {
        self.samples[0].t
    }

    pub fn end(&self) -> f64 {
        self.samples[self.samples.len() - 1].t
    }

    pub fn has_delay_override(&self) -> bool {
        self.samples[0].g.is_some()
    }

    /// Pose at time `t`: linear interpolation of position and delays,
    /// normalized linear interpolation of the quaternion.
    pub fn at(&self, t: f64) -> TrackPoint {
        let s = &self.samples;
        if t <= s[0].t || s.len() == 1 {
            return TrackPoint { pose: s[0].pose, g: s[0].g, clamped: t < s[0].t };
        }
        let last = s[s.len() - 1];
        if t >= last.t {
            return TrackPoint { pose: last.pose, g: last.g, clamped: t > last.t };
        }
        let hi = s.partition_point(|p| p.t <= t);
        let (a, b) = (s[hi - 1], s[hi]);
        if a.t == t {
            return TrackPoint { pose: a.pose, g: a.g, clamped: false };
        }
        let u = (t - a.t) / (b.t - a.t);
        let pose = Pose { position: lerp3(a.pose.position, b.pose.position, u), quat: nlerp(a.pose.quat, b.pose.quat, u) };
        let g = match (a.g, b.g) {
            (Some(x), Some(y)) => Some([x[0] + u * (y[0] - x[0]), x[1] + u * (y[1] - x[1])]),
            _ => None,
        };
        TrackPoint { pose, g, clamped: false }
    }

    /// Reads `t,x,y,z,qw,qx,qy,qz` with optional `gl,gr` (per-ear) or `g`
    /// (both ears) delay columns in samples.
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| NfsError::ingestion(path, e.to_string()))?;
        let headers = rdr.headers().map_err(|e| NfsError::ingestion(path, e.to_string()))?.clone();
        let index: HashMap<&str, usize> = headers.iter().enumerate().map(|(i, h)| (h, i)).collect();
        let mut cols = [0usize; 8];
        for (c, name) in cols.iter_mut().zip(POSE_COLUMNS) {
            *c = *index
                .get(name)
                .ok_or_else(|| NfsError::ingestion(path, format!("missing column `{name}`")))?;
        }
        let g_cols = match (index.get("gl"), index.get("gr"), index.get("g")) {
            (Some(&l), Some(&r), _) => Some([l, r]),
            (None, None, Some(&g)) => Some([g, g]),
            (None, None, None) => None,
            _ => return Err(NfsError::ingestion(path, "delay override needs both `gl` and `gr`")),
        };
        let mut samples = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let row = i + 2;
            let rec = rec.map_err(|e| NfsError::ingestion(path, format!("row {row}: {e}")))?;
            let field = |c: usize| -> Result<f64> {
                let s = rec.get(c).unwrap_or("");
                s.parse::<f64>()
                    .map_err(|_| NfsError::ingestion(path, format!("row {row}: `{s}` is not a number")))
            };
            let v: Vec<f64> = cols.iter().map(|&c| field(c)).collect::<Result<_>>()?;
            let g = match g_cols {
                Some([l, r]) => Some([field(l)?, field(r)?]),
                None => None,
            };
            samples.push(PoseSample {
                t: v[0],
                pose: Pose { position: [v[1], v[2], v[3]], quat: [v[4], v[5], v[6], v[7]] },
                g,
            });
        }
        Self::new(samples, path)
    }

    /// Writes the track with shortest round-trip decimal formatting.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let to_err = |e: csv::Error| NfsError::ingestion(path, e.to_string());
        let mut w = csv::Writer::from_path(path).map_err(to_err)?;
        let mut header: Vec<&str> = POSE_COLUMNS.to_vec();
        if self.has_delay_override() {
            header.extend(["gl", "gr"]);
        }
        w.write_record(&header).map_err(to_err)?;
        for s in &self.samples {
            let mut row: Vec<String> = std::iter::once(s.t)
                .chain(s.pose.position)
                .chain(s.pose.quat)
                .map(|v| v.to_string())
                .collect();
            if let Some(g) = s.g {
                row.extend(g.iter().map(|v| v.to_string()));
            }
            w.write_record(&row).map_err(to_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Per-frame conditioning for `len` samples starting `offset` samples into
/// the track's audio: poses at frame centres, delays from the track's
/// override columns when present, otherwise from geometry.
pub fn frame_conditions(track: &PoseTrack, cfg: &NfsConfig, offset: usize, len: usize) -> Result<FrameConditions> {
    let plan = cfg.plan()?;
    let frames = plan.num_frames(len)?;
    let fs = cfg.sample_rate as f64;
    let mut poses = Vec::with_capacity(frames);
    let mut g = [Vec::with_capacity(frames), Vec::with_capacity(frames)];
    let mut clamped = 0;
    for f in 0..frames {
        let p = track.at((offset as f64 + plan.frame_center(f)) / fs);
        clamped += p.clamped as usize;
        poses.push(p.pose);
        if let Some(d) = p.g {
            g[0].push(d[0]);
            g[1].push(d[1]);
        }
    }
    if clamped > 0 {
        log::debug!("{clamped} of {frames} frame centres outside the pose track, clamped to its ends");
    }
    if track.has_delay_override() {
        FrameConditions::with_g(poses, g)
    } else {
        FrameConditions::from_poses(poses, cfg)
    }
}

/// Frame-centre poses only.
pub fn poses_for_frames(track: &PoseTrack, cfg: &NfsConfig, len: usize) -> Result<Vec<Pose>> {
    Ok(frame_conditions(track, cfg, 0, len)?.poses)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Validation,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedRecord {
    pub id: String,
    pub mono: AudioBuffer,
    pub binaural: AudioBuffer,
    pub track: PoseTrack,
    pub split: Split,
}

impl PairedRecord {
    pub fn new(id: impl Into<String>, mono: AudioBuffer, binaural: AudioBuffer, track: PoseTrack) -> Result<Self> {
        let id = id.into();
        let src = PathBuf::from(&id);
        if mono.num_channels() != 1 || binaural.num_channels() != 2 {
            return Err(NfsError::ingestion(
                &src,
                format!("expected mono + stereo, got {} + {} channels", mono.num_channels(), binaural.num_channels()),
            ));
        }
        if mono.sample_rate != binaural.sample_rate {
            return Err(NfsError::ingestion(
                &src,
                format!("sample rates differ: {} vs {}", mono.sample_rate, binaural.sample_rate),
            ));
        }
        if mono.len() != binaural.len() {
            return Err(NfsError::ingestion(&src, format!("lengths differ: {} vs {}", mono.len(), binaural.len())));
        }
        let duration = mono.len() as f64 / mono.sample_rate as f64;
        let slack = MAX_GAP_ROWS / POSE_RATE;
        if track.start() > slack || track.end() < duration - slack {
            return Err(NfsError::ingestion(
                &src,
                format!("pose track {}..{} s does not cover audio of {duration} s", track.start(), track.end()),
            ));
        }
        Ok(Self { id, mono, binaural, track, split: Split::Train })
    }

    pub fn len(&self) -> usize {
        self.mono.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mono.is_empty()
    }

    pub fn seconds(&self) -> f64 {
        self.mono.len() as f64 / self.mono.sample_rate as f64
    }

    /// Writes `<id>_mono.wav`, `<id>_binaural.wav` and `<id>_poses.csv` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>, format: SampleFormat) -> Result<[PathBuf; 3]> {
        let dir = dir.as_ref();
        let paths = [
            dir.join(format!("{}_mono.wav", self.id)),
            dir.join(format!("{}_binaural.wav", self.id)),
            dir.join(format!("{}_poses.csv", self.id)),
        ];
        self.mono.write_wav(&paths[0], format)?;
        self.binaural.write_wav(&paths[1], format)?;
        self.track.write_csv(&paths[2])?;
        Ok(paths)
    }
}

fn wav_error(path: &Path, e: NfsError) -> NfsError {
    match e {
        NfsError::Ingestion { .. } => e,
        other => NfsError::ingestion(path, other.to_string()),
    }
}

/// Loads and validates one record; errors name the offending file.
pub fn load_pair(mono: impl AsRef<Path>, binaural: impl AsRef<Path>, poses: impl AsRef<Path>) -> Result<PairedRecord> {
    let (mp, bp, pp) = (mono.as_ref(), binaural.as_ref(), poses.as_ref());
    let m = AudioBuffer::read_wav(mp).map_err(|e| wav_error(mp, e))?;
    let b = AudioBuffer::read_wav(bp).map_err(|e| wav_error(bp, e))?;
    if m.num_channels() != 1 {
        return Err(NfsError::ingestion(mp, format!("expected mono, found {} channels", m.num_channels())));
    }
    if b.num_channels() != 2 {
        return Err(NfsError::ingestion(bp, format!("expected stereo, found {} channels", b.num_channels())));
    }
    if m.sample_rate != b.sample_rate {
        return Err(NfsError::ingestion(bp, format!("sample rate {} differs from mono {}", b.sample_rate, m.sample_rate)));
    }
    if m.len() != b.len() {
        return Err(NfsError::ingestion(bp, format!("{} samples, mono has {}", b.len(), m.len())));
    }
    let track = PoseTrack::read_csv(pp)?;
    let id = mp.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    PairedRecord::new(id, m, b, track).map_err(|e| match e {
        NfsError::Ingestion { msg, .. } => NfsError::ingestion(pp, msg),
        other => other,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub mono: PathBuf,
    pub binaural: PathBuf,
    pub poses: PathBuf,
    #[serde(default)]
    pub split: Split,
}

/// Dataset listing, stored as TOML with one `[[record]]` table per entry.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    #[serde(default, rename = "record")]
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| NfsError::ingestion(path, e.to_string()))?;
        toml::from_str(&text).map_err(|e| NfsError::ingestion(path, e.to_string()))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| NfsError::Config(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    /// Loads every record. Relative paths resolve against `root`, else the
    /// `NFS_DATA_ROOT` directory, else the manifest's own directory.
    pub fn load(&self, manifest_dir: &Path, root: Option<&Path>) -> Result<Vec<PairedRecord>> {
        let env_root = std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from);
        let base = root.map(Path::to_path_buf).or(env_root).unwrap_or_else(|| manifest_dir.to_path_buf());
        self.records
            .iter()
            .map(|r| {
                let mut rec = load_pair(base.join(&r.mono), base.join(&r.binaural), base.join(&r.poses))?;
                rec.id = r.id.clone();
                rec.split = r.split;
                Ok(rec)
            })
            .collect()
    }
}

pub fn load_manifest(path: impl AsRef<Path>, root: Option<&Path>) -> Result<Vec<PairedRecord>> {
    let path = path.as_ref();
    let dir = path.parent().unwrap_or(Path::new("."));
    DatasetManifest::read(path)?.load(dir, root)
}

/// Seeded utterance-level split: marks about `fraction` of the train records
/// (at least one when there are two or more) as validation.
pub fn split_by_utterance(records: &mut [PairedRecord], fraction: f64, rng: &mut impl Rng) {
    let mut train: Vec<usize> = (0..records.len()).filter(|&i| records[i].split == Split::Train).collect();
    if train.len() < 2 || fraction <= 0.0 {
        return;
    }
    let want = ((train.len() as f64 * fraction).round() as usize).clamp(1, train.len() - 1);
    for _ in 0..want {
        let k = rng.random_range(0..train.len());
        records[train.swap_remove(k)].split = Split::Validation;
    }
}

/// One cropped training example.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainItem {
    pub record: usize,
    pub offset: usize,
    pub mono: Vec<f64>,
    pub target: AudioBuffer,
    pub cond: FrameConditions,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainBatch {
    pub items: Vec<TrainItem>,
}

pub fn crop_item(rec: &PairedRecord, index: usize, offset: usize, len: usize, cfg: &NfsConfig) -> Result<TrainItem> {
    let end = offset + len;
    if end > rec.len() {
        return Err(NfsError::contract(format!("crop {offset}..{end} beyond {} samples of {}", rec.len(), rec.id)));
    }
    let mono = rec.mono.channel(0)[offset..end].to_vec();
    let target = AudioBuffer::stereo(
        rec.binaural.channel(0)[offset..end].to_vec(),
        rec.binaural.channel(1)[offset..end].to_vec(),
        rec.binaural.sample_rate,
    )?;
    let cond = frame_conditions(&rec.track, cfg, offset, len)?;
    Ok(TrainItem { record: index, offset, mono, target, cond })
}

/// Draws `b` crops of `crop_len` samples: record uniformly among those long
/// enough, then offset uniformly. Short records are skipped with a warning.
pub fn sample_batch(
    records: &[PairedRecord],
    rng: &mut impl Rng,
    b: usize,
    crop_len: usize,
    cfg: &NfsConfig,
) -> Result<TrainBatch> {
    let eligible: Vec<usize> = (0..records.len()).filter(|&i| records[i].len() >= crop_len).collect();
    if eligible.len() < records.len() {
        log::warn!("{} records shorter than the {crop_len}-sample crop skipped", records.len() - eligible.len());
    }
    if eligible.is_empty() {
        return Err(NfsError::contract(format!("no record holds a {crop_len}-sample crop")));
    }
    let mut items = Vec::with_capacity(b);
    for _ in 0..b {
        let idx = eligible[rng.random_range(0..eligible.len())];
        let offset = rng.random_range(0..=records[idx].len() - crop_len);
        items.push(crop_item(&records[idx], idx, offset, crop_len, cfg)?);
    }
    Ok(TrainBatch { items })
}

// ---------------------------------------------------------------------------
// Synthetic ground truth

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    /// Band-limited noise with a syllable-rate envelope.
    Speech,
    /// Harmonic complexes with gliding pitch.
    Tones,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSource {
    pub start: [f64; 3],
    /// Metres per second; zero for a static source.
    pub velocity: [f64; 3],
    pub kind: SourceKind,
    pub seconds: f64,
    /// Per-ear gain numerator: target gain is `ear_scale / distance^2`.
    pub ear_scale: [f64; 2],
}

impl SynthSource {
    pub fn fixed(position: [f64; 3], seconds: f64) -> Self {
        Self { start: position, velocity: [0.0; 3], kind: SourceKind::Speech, seconds, ear_scale: [1.0, 1.0] }
    }

    pub fn position_at(&self, t: f64) -> [f64; 3] {
        [0, 1, 2].map(|i| self.start[i] + self.velocity[i] * t)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub sources: Vec<SynthSource>,
    pub sample_rate: u32,
    pub speed_of_sound: f64,
    pub ear_offset: f64,
    /// RMS level of the mono source.
    pub level: f64,
    pub kernel: SincKernel,
}

impl SynthSpec {
    pub fn new(sources: Vec<SynthSource>) -> Self {
        Self {
            sources,
            sample_rate: dsp::DEFAULT_SAMPLE_RATE,
            speed_of_sound: dsp::SPEED_OF_SOUND,
            ear_offset: dsp::EAR_OFFSET,
            level: 0.1,
            kernel: SincKernel::default(),
        }
    }
}

fn one_pole(x: &mut [f64], cutoff: f64, fs: f64) {
    let a = (-2.0 * std::f64::consts::PI * cutoff / fs).exp();
    let mut y = 0.0;
    for v in x.iter_mut() {
        y = (1.0 - a) * *v + a * y;
        *v = y;
    }
}

fn speech_like(n: usize, fs: f64, rng: &mut impl Rng) -> Vec<f64> {
    let white: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    // Band-pass roughly 150 Hz .. 3 kHz: two low-pass stages minus a slow one.
    let mut lo = white.clone();
    one_pole(&mut lo, 3000.0, fs);
    one_pole(&mut lo, 3000.0, fs);
    let mut slow = lo.clone();
    one_pole(&mut slow, 150.0, fs);
    let rate = rng.random_range(3.0..5.0);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    (0..n)
        .map(|i| {
            let t = i as f64 / fs;
            let env = 0.5 + 0.5 * (std::f64::consts::TAU * rate * t + phase).sin();
            (lo[i] - slow[i]) * (0.1 + env * env)
        })
        .collect()
}

fn tone_complex(n: usize, fs: f64, rng: &mut impl Rng) -> Vec<f64> {
    let f0 = rng.random_range(110.0..260.0);
    let glide = rng.random_range(-0.1..0.1);
    let harmonics = (4000.0 / f0) as usize;
    let phases: Vec<f64> = (0..harmonics).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
    let mut phase = 0.0;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 / fs;
        let f = f0 * (1.0 + glide * (std::f64::consts::TAU * 0.5 * t).sin());
        phase += std::f64::consts::TAU * f / fs;
        let mut v = 0.0;
        for (h, p) in phases.iter().enumerate() {
            let k = (h + 1) as f64;
            if k * f < 0.45 * fs {
                v += (k * phase + p).sin() / k;
            }
        }
        out.push(v);
    }
    out
}

fn normalize_rms(x: &mut [f64], level: f64) {
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt();
    if rms > 0.0 {
        x.iter_mut().for_each(|v| *v *= level / rms);
    }
}

/// Renders the exact binaural target of a source: per ear, a windowed-sinc
/// delay of `distance / c` seconds and gain `ear_scale / distance^2`.
pub fn synth_binaural(mono: &[f64], src: &SynthSource, spec: &SynthSpec) -> Vec<Vec<f64>> {
    let fs = spec.sample_rate as f64;
    let ears = dsp::ear_positions(spec.ear_offset);
    ears.iter()
        .enumerate()
        .map(|(e, ear)| {
            let dist = |i: usize| {
                let p = src.position_at(i as f64 / fs);
                p.iter().zip(ear).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt().max(dsp::MIN_DISTANCE)
            };
            spec.kernel.delay_line(mono, |i| dist(i) / spec.speed_of_sound * fs, |i| src.ear_scale[e] / dist(i).powi(2))
        })
        .collect()
}

/// One record per source: a synthetic mono signal, its analytic binaural
/// target and a 120 Hz pose track following the source.
pub fn synth_dataset(spec: &SynthSpec, rng: &mut impl Rng) -> Result<Vec<PairedRecord>> {
    let fs = spec.sample_rate as f64;
    spec.sources
        .iter()
        .enumerate()
        .map(|(i, src)| {
            let n = (src.seconds * fs).round() as usize;
            let mut mono = match src.kind {
                SourceKind::Speech => speech_like(n, fs, rng),
                SourceKind::Tones => tone_complex(n, fs, rng),
            };
            normalize_rms(&mut mono, spec.level);
            let [l, r]: [Vec<f64>; 2] = synth_binaural(&mono, src, spec).try_into().expect("two ears");
            let track = PoseTrack::from_fn(src.seconds, |t| Pose::at(src.position_at(t)));
            PairedRecord::new(
                format!("synth{i:03}"),
                AudioBuffer::mono(mono, spec.sample_rate)?,
                AudioBuffer::stereo(l, r, spec.sample_rate)?,
                track,
            )
        })
        .collect()
}
