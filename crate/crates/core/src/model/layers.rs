//! Trainable blocks. Each layer holds [`ParamId`]s into the model's store and
//! reads the matching tape variables at forward time.

use nfs_gradcore::{ParamId, ParamStore, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;

/// Registers parameters under a common name prefix.
pub(crate) struct Builder<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn add(&mut self, name: String, t: Tensor) -> Result<ParamId> {
        Ok(self.store.add(name, t)?)
    }

    pub fn uniform(&mut self, name: String, shape: &[usize], bound: f64) -> Result<ParamId> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        self.add(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn gaussian(&mut self, name: String, shape: &[usize], scale: f64) -> Result<ParamId> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| scale * self.rng.sample::<f64, _>(StandardNormal)).collect();
        self.add(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn constant(&mut self, name: String, shape: &[usize], value: f64) -> Result<ParamId> {
        self.add(name, Tensor::full(shape.to_vec(), value))
    }
}

/// `x W + b` over the last axis, `W: [in, out]`.
#[derive(Clone, Debug)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(bd: &mut Builder, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Result<Self> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = bd.uniform(format!("{name}.w"), &[fan_in, fan_out], bound)?;
        let b = if bias { Some(bd.uniform(format!("{name}.b"), &[fan_out], bound)?) } else { None };
        Ok(Self { w, b, fan_in, fan_out })
    }

    pub fn forward(&self, t: &mut Tape, v: &[Var], x: Var) -> Result<Var> {
        let y = t.matmul(x, v[self.w.0])?;
        Ok(match self.b {
            Some(b) => t.add(y, v[b.0])?,
            None => y,
        })
    }

    pub fn macs(&self) -> u64 {
        (self.fan_in * self.fan_out) as u64
    }
}

/// Mixes along the channel axis: `W x + b` for `x: [.., chan, width]`,
/// `W: [chan, chan]`, `b: [chan, 1]`.
#[derive(Clone, Debug)]
pub(crate) struct ChannelLinear {
    pub w: ParamId,
    pub b: ParamId,
    pub chan: usize,
}

impl ChannelLinear {
    pub fn new(bd: &mut Builder, name: &str, chan: usize, bias_init: Option<f64>) -> Result<Self> {
        let bound = 1.0 / (chan as f64).sqrt();
        let w = bd.uniform(format!("{name}.w"), &[chan, chan], bound)?;
        let b = match bias_init {
            Some(v) => bd.constant(format!("{name}.b"), &[chan, 1], v)?,
            None => bd.uniform(format!("{name}.b"), &[chan, 1], bound)?,
        };
        Ok(Self { w, b, chan })
    }

    pub fn forward(&self, t: &mut Tape, v: &[Var], x: Var) -> Result<Var> {
        let y = t.matmul(v[self.w.0], x)?;
        Ok(t.add(y, v[self.b.0])?)
    }
}

/// Condition encoder stage applied after the sinusoidal encoding.
#[derive(Clone, Debug)]
pub(crate) enum Encoder {
    /// Learned Fourier features: `[sin(x B), cos(x B)]`.
    Lff { b: ParamId, features: usize, dim: usize },
    /// Plain learned projection of the same width.
    Linear(Linear),
}

impl Encoder {
    pub fn new(bd: &mut Builder, name: &str, dim: usize, lff: Option<(usize, f64)>) -> Result<Self> {
        Ok(match lff {
            Some((features, scale)) => {
                let b = bd.gaussian(format!("{name}.lff"), &[dim, features], scale)?;
                Encoder::Lff { b, features, dim }
            }
            None => Encoder::Linear(Linear::new(bd, &format!("{name}.linear"), dim, dim, true)?),
        })
    }

    /// `x: [F, dim]` to `[F, dim]`.
    pub fn forward(&self, t: &mut Tape, v: &[Var], x: Var) -> Result<Var> {
        match self {
            Encoder::Lff { b, .. } => {
                let h = t.matmul(x, v[b.0])?;
                let s = t.sin(h);
                let c = t.cos(h);
                Ok(t.concat(&[s, c], 1)?)
            }
            Encoder::Linear(l) => l.forward(t, v, x),
        }
    }

    pub fn macs(&self) -> u64 {
        match self {
            Encoder::Lff { features, dim, .. } => (features * dim) as u64,
            Encoder::Linear(l) => l.macs(),
        }
    }
}

/// Single-head cross-attention over an embedding split into tokens: the
/// position embedding queries, the orientation embedding supplies keys and
/// values, and the result is added back onto the position embedding.
#[derive(Clone, Debug)]
pub(crate) struct CrossAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub tokens: usize,
    pub width: usize,
}

impl CrossAttention {
    pub fn new(bd: &mut Builder, name: &str, dim: usize, tokens: usize) -> Result<Self> {
        let width = dim / tokens;
        Ok(Self {
            q: Linear::new(bd, &format!("{name}.q"), width, width, true)?,
            k: Linear::new(bd, &format!("{name}.k"), width, width, true)?,
            v: Linear::new(bd, &format!("{name}.v"), width, width, true)?,
            o: Linear::new(bd, &format!("{name}.o"), width, width, false)?,
            tokens,
            width,
        })
    }

    /// `pos, ori: [F, dim]` to `[F, dim]`.
    pub fn forward(&self, t: &mut Tape, v: &[Var], pos: Var, ori: Var) -> Result<Var> {
        let f = t.shape(pos)[0];
        let shape = [f, self.tokens, self.width];
        let pt = t.reshape(pos, shape)?;
        let ot = t.reshape(ori, shape)?;
        let q = self.q.forward(t, v, pt)?;
        let k = self.k.forward(t, v, ot)?;
        let val = self.v.forward(t, v, ot)?;
        let kt = t.transpose(k)?;
        let scores = t.matmul(q, kt)?;
        let scores = t.scale(scores, 1.0 / (self.width as f64).sqrt());
        let attn = t.softmax(scores, 2)?;
        let mixed = t.matmul(attn, val)?;
        let out = self.o.forward(t, v, mixed)?;
        let out = t.reshape(out, [f, self.tokens * self.width])?;
        Ok(t.add(pos, out)?)
    }

    pub fn macs(&self) -> u64 {
        let (n, w) = (self.tokens as u64, self.width as u64);
        // Four token projections plus scores and weighted values.
        4 * n * w * w + 2 * n * n * w
    }
}

/// Projects one embedding row to `chan` rows: `out[c, j] = a_c e_j + b_c`.
#[derive(Clone, Debug)]
pub(crate) struct ChannelProjection {
    pub a: ParamId,
    pub b: ParamId,
}

impl ChannelProjection {
    pub fn new(bd: &mut Builder, name: &str, chan: usize) -> Result<Self> {
        Ok(Self {
            a: bd.uniform(format!("{name}.a"), &[chan, 1], 1.0)?,
            b: bd.uniform(format!("{name}.b"), &[chan, 1], 1.0)?,
        })
    }

    /// `[F, dim]` to `[F, chan, dim]`.
    pub fn forward(&self, t: &mut Tape, v: &[Var], x: Var) -> Result<Var> {
        let s = t.shape(x).to_vec();
        let x = t.reshape(x, [s[0], 1, s[1]])?;
        let y = t.mul(x, v[self.a.0])?;
        Ok(t.add(y, v[self.b.0])?)
    }
}

/// Squeeze-and-excitation gate over channels.
#[derive(Clone, Debug)]
pub(crate) struct SqueezeExcite {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl SqueezeExcite {
    pub fn new(bd: &mut Builder, name: &str, chan: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(bd, &format!("{name}.fc1"), chan, hidden, true)?,
            fc2: Linear::new(bd, &format!("{name}.fc2"), hidden, chan, true)?,
        })
    }

    /// Per-channel gate in `(0, 1)`, shape `[F, chan, 1]`.
    pub fn gate(&self, t: &mut Tape, v: &[Var], x: Var) -> Result<Var> {
        let s = t.shape(x).to_vec();
        let pooled = t.mean_axis(x, 2)?;
        let pooled = t.reshape(pooled, [s[0], s[1]])?;
        let h = self.fc1.forward(t, v, pooled)?;
        let h = t.relu(h);
        let g = self.fc2.forward(t, v, h)?;
        let g = t.sigmoid(g);
        Ok(t.reshape(g, [s[0], s[1], 1])?)
    }

    pub fn forward(&self, t: &mut Tape, v: &[Var], x: Var) -> Result<Var> {
        let g = self.gate(t, v, x)?;
        Ok(t.mul(x, g)?)
    }

    pub fn macs(&self, width: usize) -> u64 {
        self.fc1.macs() + self.fc2.macs() + (self.fc1.fan_in * width) as u64
    }
}

/// gMLP block with a spatial gating unit mixing along the channel axis.
#[derive(Clone, Debug)]
pub(crate) struct Gmlp {
    pub fc_in: Linear,
    pub spatial: ChannelLinear,
    pub fc_out: Linear,
}

impl Gmlp {
    pub fn new(bd: &mut Builder, name: &str, chan: usize, dim: usize, hidden: usize) -> Result<Self> {
        let fc_in = Linear::new(bd, &format!("{name}.fc_in"), dim, hidden, true)?;
        // Near-identity gate at initialization: tiny spatial weights, unit bias.
        let w = bd.uniform(format!("{name}.sgu.w"), &[chan, chan], 1e-3)?;
        let b = bd.constant(format!("{name}.sgu.b"), &[chan, 1], 1.0)?;
        let fc_out = Linear::new(bd, &format!("{name}.fc_out"), hidden / 2, dim, true)?;
        Ok(Self { fc_in, spatial: ChannelLinear { w, b, chan }, fc_out })
    }

    /// `[F, chan, dim]` to `[F, chan, dim]` with a residual connection.
    pub fn forward(&self, t: &mut Tape, v: &[Var], x: Var) -> Result<Var> {
        let half = self.fc_in.fan_out / 2;
        let z = t.layernorm(x)?;
        let h = self.fc_in.forward(t, v, z)?;
        let h = t.gelu(h);
        let u = t.slice(h, 2, 0, half)?;
        let g = t.slice(h, 2, half, half)?;
        let g = t.layernorm(g)?;
        let g = self.spatial.forward(t, v, g)?;
        let y = t.mul(u, g)?;
        let y = self.fc_out.forward(t, v, y)?;
        Ok(t.add(x, y)?)
    }

    pub fn macs(&self) -> u64 {
        let chan = self.spatial.chan as u64;
        let half = (self.fc_in.fan_out / 2) as u64;
        chan * (self.fc_in.macs() + self.fc_out.macs() + half) + chan * chan * half
    }
}

/// Cross-attention, channel projection, squeeze-excitation and gMLP: the part
/// of a Scaler/Shifter head that works at embedding resolution.
#[derive(Clone, Debug)]
pub(crate) struct HeadBody {
    pub attn: CrossAttention,
    pub proj: ChannelProjection,
    pub se: SqueezeExcite,
    pub gmlp: Vec<Gmlp>,
}

impl HeadBody {
    pub fn new(bd: &mut Builder, name: &str, cfg: &super::NfsConfig) -> Result<Self> {
        let gmlp = (0..cfg.gmlp_depth)
            .map(|i| Gmlp::new(bd, &format!("{name}.gmlp{i}"), cfg.chan, cfg.embed_dim, cfg.gmlp_hidden))
            .collect::<Result<_>>()?;
        Ok(Self {
            attn: CrossAttention::new(bd, &format!("{name}.attn"), cfg.embed_dim, cfg.attn_tokens)?,
            proj: ChannelProjection::new(bd, &format!("{name}.proj"), cfg.chan)?,
            se: SqueezeExcite::new(bd, &format!("{name}.se"), cfg.chan, cfg.se_hidden())?,
            gmlp,
        })
    }

    /// `pos, ori: [F, dim]` to `[F, chan, dim]`.
    pub fn forward(&self, t: &mut Tape, v: &[Var], pos: Var, ori: Var) -> Result<Var> {
        let fused = self.attn.forward(t, v, pos, ori)?;
        let mut x = self.proj.forward(t, v, fused)?;
        x = self.se.forward(t, v, x)?;
        for g in &self.gmlp {
            x = g.forward(t, v, x)?;
        }
        Ok(x)
    }

    pub fn macs(&self, chan: usize, dim: usize) -> u64 {
        self.attn.macs()
            + (chan * dim) as u64
            + self.se.macs(dim)
            + self.gmlp.iter().map(Gmlp::macs).sum::<u64>()
    }
}
