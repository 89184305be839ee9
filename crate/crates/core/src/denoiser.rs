//! Point-denoising U-Net predicting the clean signal from a corrupted input.
//!
//! Continuous mode maps `[N, C, H, W]` images to `x̂_0` of the same shape.
//! Discrete mode embeds token maps (mask token included) and returns a
//! per-position softmax over the `K` codebook entries. Both modes expose a
//! feature tap at output resolution for the context head.

use ndarray::{Array1, Array4, ArrayD, Ix4, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::corruption::TokenMap;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Embedding, GroupNorm, Linear, ParamStore};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenoiserMode {
    Continuous,
    Discrete,
}

/// Where the context head reads its features.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TapLayer {
    /// Output of the last decoder block, before the output head.
    #[default]
    LastUpBlock,
    /// After the output normalization and activation.
    OutputNorm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserCfg {
    pub mode: DenoiserMode,
    /// Image channels (continuous mode).
    pub in_channels: usize,
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    pub time_emb_dim: usize,
    /// Codebook size `K` (discrete mode).
    pub codebook_size: usize,
    pub token_emb_dim: usize,
    pub groups: usize,
    pub tap: TapLayer,
    /// Largest valid timestep `T`.
    pub timesteps: usize,
}

impl Default for DenoiserCfg {
    fn default() -> Self {
        Self {
            mode: DenoiserMode::Continuous,
            in_channels: 3,
            base_channels: 32,
            channel_mults: vec![1, 2, 2],
            time_emb_dim: 64,
            codebook_size: 16,
            token_emb_dim: 16,
            groups: 8,
            tap: TapLayer::LastUpBlock,
            timesteps: 2000,
        }
    }
}

impl DenoiserCfg {
    pub fn tap_channels(&self) -> usize {
        self.base_channels * self.channel_mults.first().copied().unwrap_or(1)
    }

    pub fn out_channels(&self) -> usize {
        match self.mode {
            DenoiserMode::Continuous => self.in_channels,
            DenoiserMode::Discrete => self.codebook_size,
        }
    }

    /// Spatial sizes must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.channel_mults.len().saturating_sub(1)
    }

    fn validate(&self) -> Result<()> {
        if self.channel_mults.is_empty() || self.channel_mults.contains(&0) {
            return Err(Error::param("channel_mults", "need at least one positive multiplier"));
        }
        if self.base_channels == 0 {
            return Err(Error::param("base_channels", "must be >= 1"));
        }
        if self.time_emb_dim == 0 || self.time_emb_dim % 2 != 0 {
            return Err(Error::param("time_emb_dim", "must be even and positive"));
        }
        if self.timesteps == 0 {
            return Err(Error::param("timesteps", "must be >= 1"));
        }
        match self.mode {
            DenoiserMode::Continuous if self.in_channels == 0 => {
                Err(Error::param("in_channels", "must be >= 1"))
            }
            DenoiserMode::Discrete if self.codebook_size < 2 => {
                Err(Error::param("codebook_size", "must be >= 2"))
            }
            DenoiserMode::Discrete if self.token_emb_dim == 0 => {
                Err(Error::param("token_emb_dim", "must be >= 1"))
            }
            _ => Ok(()),
        }
    }
}

/// Sinusoidal embedding: `dim/2` sines followed by `dim/2` cosines over a
/// geometric frequency ladder from 1 down to 1/10000.
pub fn time_embedding<F: Scalar>(t: usize, dim: usize) -> Result<Array1<F>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::param("dim", format!("must be even and positive, got {dim}")));
    }
    let half = dim / 2;
    let t = t as f64;
    let mut out = Array1::zeros(dim);
    for k in 0..half {
        let freq = (-(10000f64).ln() * k as f64 / half as f64).exp();
        out[k] = F::of((t * freq).sin());
        out[half + k] = F::of((t * freq).cos());
    }
    Ok(out)
}

/// Rows of sinusoidal embeddings, one per entry of `ts`.
pub fn time_embedding_rows<F: Scalar>(ts: &[usize], dim: usize) -> Result<ArrayD<F>> {
    let mut out = ArrayD::zeros(IxDyn(&[ts.len(), dim]));
    for (i, &t) in ts.iter().enumerate() {
        let e = time_embedding::<F>(t, dim)?;
        out.slice_mut(ndarray::s![i, ..]).assign(&e);
    }
    Ok(out)
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn norm<F: Scalar>(store: &mut ParamStore<F>, name: &str, groups: usize, ch: usize) -> Result<GroupNorm> {
    GroupNorm::new(store, name, gcd(groups, ch).max(1), ch)
}

#[derive(Clone, Debug, PartialEq)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    temb: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
    out: usize,
}

impl ResBlock {
    fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        inp: usize,
        out: usize,
        temb: usize,
        groups: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            norm1: norm(store, &format!("{name}.norm1"), groups, inp)?,
            conv1: Conv2d::new(store, &format!("{name}.conv1"), inp, out, 3, rng)?,
            temb: Linear::new(store, &format!("{name}.temb"), temb, out, rng)?,
            norm2: norm(store, &format!("{name}.norm2"), groups, out)?,
            conv2: Conv2d::new(store, &format!("{name}.conv2"), out, out, 3, rng)?,
            skip: if inp == out {
                None
            } else {
                Some(Conv2d::new(store, &format!("{name}.skip"), inp, out, 1, rng)?)
            },
            out,
        })
    }

    fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        x: Var,
        temb: Var,
    ) -> Result<Var> {
        let n = tape.shape(x)[0];
        let h = self.norm1.forward(tape, store, x)?;
        let h = tape.silu(h);
        let h = self.conv1.forward(tape, store, h)?;
        let e = self.temb.forward(tape, store, temb)?;
        let e = tape.reshape(e, &[n, self.out, 1, 1])?;
        let h = tape.add(h, e)?;
        let h = self.norm2.forward(tape, store, h)?;
        let h = tape.silu(h);
        let h = self.conv2.forward(tape, store, h)?;
        let skip = match &self.skip {
            Some(c) => c.forward(tape, store, x)?,
            None => x,
        };
        tape.add(h, skip)
    }
}

/// The network's input for one batch.
#[derive(Clone, Copy, Debug)]
pub enum DenoiserInput<'a, F> {
    /// `[N, C, H, W]`
    Continuous(&'a Array4<F>),
    Discrete(&'a [TokenMap]),
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    /// `x̂_0` as `[N, C, H, W]`, or token probabilities as `[N, K, H, W]`.
    pub primary: Var,
    /// `[N, tap_channels, H, W]`
    pub tap: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointPrediction<F> {
    pub primary: Array4<F>,
    pub tap: Array4<F>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser {
    pub cfg: DenoiserCfg,
    time1: Linear,
    time2: Linear,
    token_emb: Option<Embedding>,
    conv_in: Conv2d,
    down: Vec<ResBlock>,
    up: Vec<ResBlock>,
    out_norm: GroupNorm,
    out_conv: Conv2d,
}

impl Denoiser {
    pub const NAMESPACE: &'static str = "denoiser";

    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        cfg: DenoiserCfg,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let ns = Self::NAMESPACE;
        let e = cfg.time_emb_dim;
        let time1 = Linear::new(store, &format!("{ns}.time1"), e, e, rng)?;
        let time2 = Linear::new(store, &format!("{ns}.time2"), e, e, rng)?;
        let (token_emb, input_ch) = match cfg.mode {
            DenoiserMode::Continuous => (None, cfg.in_channels),
            DenoiserMode::Discrete => (
                Some(Embedding::new(
                    store,
                    &format!("{ns}.tokens"),
                    cfg.codebook_size + 1,
                    cfg.token_emb_dim,
                    rng,
                )?),
                cfg.token_emb_dim,
            ),
        };
        let ch: Vec<usize> = cfg.channel_mults.iter().map(|m| m * cfg.base_channels).collect();
        let conv_in = Conv2d::new(store, &format!("{ns}.conv_in"), input_ch, ch[0], 3, rng)?;
        let mut down = Vec::with_capacity(ch.len());
        for l in 0..ch.len() {
            let inp = if l == 0 { ch[0] } else { ch[l - 1] };
            down.push(ResBlock::new(store, &format!("{ns}.down{l}"), inp, ch[l], e, cfg.groups, rng)?);
        }
        let mut up = Vec::with_capacity(ch.len().saturating_sub(1));
        for l in (0..ch.len().saturating_sub(1)).rev() {
            up.push(ResBlock::new(
                store,
                &format!("{ns}.up{l}"),
                ch[l + 1] + ch[l],
                ch[l],
                e,
                cfg.groups,
                rng,
            )?);
        }
        let out_norm = norm(store, &format!("{ns}.out_norm"), cfg.groups, ch[0])?;
        let out_conv = Conv2d::new(store, &format!("{ns}.out_conv"), ch[0], cfg.out_channels(), 3, rng)?;
        Ok(Self { cfg, time1, time2, token_emb, conv_in, down, up, out_norm, out_conv })
    }

    /// Handle of the token embedding table (discrete mode).
    pub fn token_embedding(&self) -> Option<&Embedding> {
        self.token_emb.as_ref()
    }

    fn check_timesteps(&self, ts: &[usize], n: usize) -> Result<()> {
        if ts.len() != n {
            return Err(Error::Shape(format!("{} timesteps for batch of {n}", ts.len())));
        }
        if let Some(&t) = ts.iter().find(|&&t| t == 0 || t > self.cfg.timesteps) {
            return Err(Error::param(
                "t",
                format!("{t} outside [1, {}]", self.cfg.timesteps),
            ));
        }
        Ok(())
    }

    fn check_spatial(&self, h: usize, w: usize) -> Result<()> {
        let m = self.cfg.size_multiple();
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::Shape(format!("spatial size {h}x{w} must be a positive multiple of {m}")));
        }
        Ok(())
    }

    fn embed_input<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        input: DenoiserInput<'_, F>,
    ) -> Result<Var> {
        match (self.cfg.mode, input) {
            (DenoiserMode::Continuous, DenoiserInput::Continuous(x)) => {
                if x.shape()[1] != self.cfg.in_channels {
                    return Err(Error::Shape(format!(
                        "expected {} channels, got {:?}",
                        self.cfg.in_channels,
                        x.shape()
                    )));
                }
                self.check_spatial(x.shape()[2], x.shape()[3])?;
                Ok(tape.constant(x.clone().into_dyn()))
            }
            (DenoiserMode::Discrete, DenoiserInput::Discrete(maps)) => {
                let first = maps
                    .first()
                    .ok_or_else(|| Error::Shape("empty token batch".into()))?;
                let (h, w) = (first.height, first.width);
                self.check_spatial(h, w)?;
                let mut idx = Vec::with_capacity(maps.len() * h * w);
                for m in maps {
                    if m.height != h || m.width != w {
                        return Err(Error::Shape("token maps differ in size".into()));
                    }
                    m.validate(self.cfg.codebook_size, true)?;
                    idx.extend_from_slice(&m.tokens);
                }
                let emb = self.token_emb.as_ref().expect("discrete mode has an embedding");
                let rows = emb.forward(tape, store, &idx)?;
                let x = tape.reshape(rows, &[maps.len(), h, w, emb.dim])?;
                tape.permute(x, &[0, 3, 1, 2])
            }
            _ => Err(Error::Shape("input kind does not match denoiser mode".into())),
        }
    }

    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        input: DenoiserInput<'_, F>,
        ts: &[usize],
    ) -> Result<ForwardVars> {
        let n = match input {
            DenoiserInput::Continuous(x) => x.shape()[0],
            DenoiserInput::Discrete(m) => m.len(),
        };
        self.check_timesteps(ts, n)?;
        let x = self.embed_input(tape, store, input)?;

        let temb = tape.constant(time_embedding_rows(ts, self.cfg.time_emb_dim)?);
        let temb = self.time1.forward(tape, store, temb)?;
        let temb = tape.silu(temb);
        let temb = self.time2.forward(tape, store, temb)?;
        let temb = tape.silu(temb);

        let mut h = self.conv_in.forward(tape, store, x)?;
        let mut skips = Vec::with_capacity(self.down.len());
        for (l, block) in self.down.iter().enumerate() {
            if l > 0 {
                h = tape.avg_pool2(h)?;
            }
            h = block.forward(tape, store, h, temb)?;
            skips.push(h);
        }
        skips.pop();
        for block in &self.up {
            let skip = skips.pop().expect("one skip per decoder block");
            let u = tape.upsample2(h)?;
            let cat = tape.concat(&[u, skip], 1)?;
            h = block.forward(tape, store, cat, temb)?;
        }
        let normed = self.out_norm.forward(tape, store, h)?;
        let normed = tape.silu(normed);
        let tap = match self.cfg.tap {
            TapLayer::LastUpBlock => h,
            TapLayer::OutputNorm => normed,
        };
        let out = self.out_conv.forward(tape, store, normed)?;
        let primary = match self.cfg.mode {
            DenoiserMode::Continuous => out,
            DenoiserMode::Discrete => tape.softmax(out, 1),
        };
        Ok(ForwardVars { primary, tap })
    }
}

fn to4<F: Scalar>(a: &ArrayD<F>) -> Array4<F> {
    a.clone().into_dimensionality::<Ix4>().expect("4-D tensor")
}

/// Runs the network outside of training and checks the result is finite.
pub fn denoise_point<F: Scalar>(
    denoiser: &Denoiser,
    store: &ParamStore<F>,
    input: DenoiserInput<'_, F>,
    ts: &[usize],
) -> Result<PointPrediction<F>> {
    let mut tape = Tape::new();
    let vars = denoiser.forward(&mut tape, store, input, ts)?;
    let primary = to4(tape.value(vars.primary));
    if primary.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("denoiser output at t = {ts:?}")));
    }
    Ok(PointPrediction { primary, tap: to4(tape.value(vars.tap)) })
}
