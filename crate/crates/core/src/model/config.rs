use serde::{Deserialize, Serialize};

use crate::dsp::{FramePlan, EAR_OFFSET, SPEED_OF_SOUND};
use crate::error::{NfsError, Result};

/// Unit in which the phase delay is expressed when dividing the Scaler
/// output by `phi^2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DelayUnit {
    Samples,
    Millis,
}

/// Module switches; `true` means the module is present.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    pub ni: bool,
    pub lff: bool,
    pub shifter: bool,
    pub geowarp: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self { ni: true, lff: true, shifter: true, geowarp: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NfsConfig {
    pub sample_rate: u32,
    pub frame_len: usize,
    pub hop: usize,
    /// Channels per ear (`chan`).
    pub chan: usize,
    /// Width of the sinusoidal encodings and of every embedding.
    pub embed_dim: usize,
    /// Random Fourier projections; the LFF output is `[sin, cos]`, twice this.
    pub lff_features: usize,
    pub lff_scale: f64,
    /// The embedding is split into this many tokens for cross-attention.
    pub attn_tokens: usize,
    pub se_reduction: usize,
    /// Width of the gMLP channel projection before the spatial gating split.
    pub gmlp_hidden: usize,
    pub gmlp_depth: usize,
    /// Share encoders and head bodies between ears (output layers, mixer and
    /// noise level stay per ear).
    pub shared_trunk: bool,
    pub ablation: Ablation,
    pub delay_unit: DelayUnit,
    /// Initial bias of the Shifter output layer.
    pub shifter_bias_init: f64,
    /// Initial raw (pre-softplus) noise level.
    pub ni_init: f64,
    pub speed_of_sound: f64,
    pub ear_offset: f64,
}

impl Default for NfsConfig {
    fn default() -> Self {
        Self {
            sample_rate: 48_000,
            frame_len: 9600,
            hop: 4800,
            chan: 128,
            embed_dim: 128,
            lff_features: 64,
            lff_scale: 1.0,
            attn_tokens: 8,
            se_reduction: 4,
            gmlp_hidden: 512,
            gmlp_depth: 1,
            shared_trunk: false,
            ablation: Ablation::default(),
            delay_unit: DelayUnit::Millis,
            shifter_bias_init: -10.0,
            ni_init: -10.0,
            speed_of_sound: SPEED_OF_SOUND,
            ear_offset: EAR_OFFSET,
        }
    }
}

impl NfsConfig {
    /// Small network for finite-difference checks: frame 64, chan 4, 33 bins.
    pub fn tiny() -> Self {
        Self {
            frame_len: 64,
            hop: 32,
            chan: 4,
            embed_dim: 16,
            lff_features: 8,
            attn_tokens: 4,
            gmlp_hidden: 16,
            ..Self::default()
        }
    }

    /// Full-length frames with a narrow network, for fitting on a laptop.
    pub fn desk() -> Self {
        Self {
            chan: 8,
            embed_dim: 32,
            lff_features: 16,
            attn_tokens: 4,
            gmlp_hidden: 64,
            ..Self::default()
        }
    }

    pub fn freq(&self) -> usize {
        self.frame_len / 2 + 1
    }

    pub fn plan(&self) -> Result<FramePlan> {
        FramePlan::hann(self.frame_len, self.hop)
    }

    pub fn se_hidden(&self) -> usize {
        (self.chan / self.se_reduction.max(1)).max(1)
    }

    /// Samples per delay unit.
    pub fn unit_samples(&self) -> f64 {
        match self.delay_unit {
            DelayUnit::Samples => 1.0,
            DelayUnit::Millis => self.sample_rate as f64 / 1000.0,
        }
    }

    /// Upper bound of the learned delay before biasing, in samples.
    pub fn shift_bound(&self) -> f64 {
        if self.ablation.geowarp {
            self.frame_len as f64 / 2.0
        } else {
            self.frame_len as f64
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(NfsError::Config(m));
        if self.sample_rate == 0 || self.chan == 0 || self.embed_dim == 0 {
            return bad("sample_rate, chan and embed_dim must be positive".into());
        }
        if self.frame_len < 2 || self.hop == 0 || self.frame_len % self.hop != 0 {
            return bad(format!("hop {} must divide frame_len {}", self.hop, self.frame_len));
        }
        if self.attn_tokens == 0 || self.embed_dim % self.attn_tokens != 0 {
            return bad(format!("embed_dim {} not divisible into {} tokens", self.embed_dim, self.attn_tokens));
        }
        if self.ablation.lff && 2 * self.lff_features != self.embed_dim {
            return bad(format!(
                "LFF emits 2 x {} features but embed_dim is {}",
                self.lff_features, self.embed_dim
            ));
        }
        if self.gmlp_hidden < 2 || self.gmlp_hidden % 2 != 0 {
            return bad(format!("gmlp_hidden {} must be even and >= 2", self.gmlp_hidden));
        }
        if self.embed_dim < 6 {
            return bad("embed_dim must cover at least one frequency per position coordinate".into());
        }
        if !(self.speed_of_sound > 0.0) || !(self.ear_offset >= 0.0) || !(self.lff_scale > 0.0) {
            return bad("speed_of_sound and lff_scale must be positive, ear_offset non-negative".into());
        }
        self.plan()?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| NfsError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
