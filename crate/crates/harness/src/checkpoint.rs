//! Versioned binary checkpoints.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! magic "CPDCKPT\0" | version u32 | dtype str | config-json str | config-hash str
//! step u64 | seed u64 | rng(diffusion) | rng(context)
//! param count u32 | per param: name str, ndim u32, dims u64*, values
//! adam t u64 | m values per param | v values per param
//! palette flag u8 | [K u32, C u32, K*C f32, warning flag u8, [warning str]]
//! ```
//!
//! `str` is a u64 byte length followed by UTF-8; `rng` is the 32-byte
//! ChaCha seed, the stream (u64) and the word position (u128).

use std::path::{Path, PathBuf};

use conprediff_core::diffusion_core::{ConPreDiff, TrainState};
use conprediff_core::nn::Adam;
use conprediff_core::Scalar;
use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{HarnessError, Result};
use crate::palette::Palette;

pub const MAGIC: &[u8; 8] = b"CPDCKPT\0";
pub const VERSION: u32 = 1;
pub const FILE_NAME: &str = "checkpoint.bin";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn of(r: &ChaCha8Rng) -> Self {
        Self { seed: r.get_seed(), stream: r.get_stream(), word_pos: r.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::from_seed(self.seed);
        r.set_stream(self.stream);
        r.set_word_pos(self.word_pos);
        r
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointRecord<F> {
    pub version: u32,
    /// Serialized [`RunConfig`], kept verbatim.
    pub config_json: String,
    pub config_hash: String,
    pub step: u64,
    pub seed: u64,
    pub rng_diffusion: RngState,
    pub rng_context: RngState,
    /// Every parameter namespace (denoiser and context head), in store order.
    pub params: Vec<(String, ArrayD<F>)>,
    pub adam_t: u64,
    pub adam_m: Vec<ArrayD<F>>,
    pub adam_v: Vec<ArrayD<F>>,
    pub palette: Option<Palette>,
}

/// Accepts either a checkpoint file or a run directory containing one.
pub fn resolve_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(FILE_NAME)
    } else {
        p.to_path_buf()
    }
}

pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl<F: Scalar> CheckpointRecord<F> {
    pub fn from_state(cfg: &RunConfig, state: &TrainState<F>, palette: Option<&Palette>) -> Self {
        Self {
            version: VERSION,
            config_json: serde_json::to_string(cfg).expect("config serializes"),
            config_hash: cfg.hash(),
            step: state.step,
            seed: state.seed,
            rng_diffusion: RngState::of(&state.rng_diffusion),
            rng_context: RngState::of(&state.rng_context),
            params: state.model.params.iter().map(|(_, n, v)| (n.to_string(), v.clone())).collect(),
            adam_t: state.optimizer.t,
            adam_m: state.optimizer.m.clone(),
            adam_v: state.optimizer.v.clone(),
            palette: palette.cloned(),
        }
    }

    pub fn config(&self) -> Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_str(&self.config_json)
            .map_err(|e| HarnessError::Checkpoint(format!("embedded config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Rebuilds the training state; names, shapes and the config hash must match.
    pub fn restore(&self) -> Result<(RunConfig, TrainState<F>)> {
        let cfg = self.config()?;
        if cfg.hash() != self.config_hash {
            return Err(HarnessError::Checkpoint("embedded config does not match its hash".into()));
        }
        let mut model = ConPreDiff::<F>::new(cfg.model.clone(), self.seed)?;
        if model.params.len() != self.params.len() {
            return Err(HarnessError::Checkpoint(format!(
                "{} stored parameters, model has {}",
                self.params.len(),
                model.params.len()
            )));
        }
        for (name, value) in &self.params {
            let id = model
                .params
                .id(name)
                .ok_or_else(|| HarnessError::Checkpoint(format!("unknown parameter {name}")))?;
            model.params.set(id, value.clone()).map_err(|e| HarnessError::Checkpoint(format!("{name}: {e}")))?;
        }
        let mut state = TrainState::new(model, cfg.train_cfg(), self.seed);
        let shapes_match = |store: &[ArrayD<F>]| {
            store.len() == self.params.len() && store.iter().zip(&self.params).all(|(a, (_, p))| a.shape() == p.shape())
        };
        if !shapes_match(&self.adam_m) || !shapes_match(&self.adam_v) {
            return Err(HarnessError::Checkpoint("optimizer moments do not match the parameters".into()));
        }
        state.optimizer = Adam { cfg: state.optimizer.cfg, m: self.adam_m.clone(), v: self.adam_v.clone(), t: self.adam_t };
        state.step = self.step;
        state.rng_diffusion = self.rng_diffusion.restore();
        state.rng_context = self.rng_context.restore();
        Ok((cfg, state))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        w.extend_from_slice(&self.version.to_le_bytes());
        put_str(&mut w, F::DTYPE);
        put_str(&mut w, &self.config_json);
        put_str(&mut w, &self.config_hash);
        w.extend_from_slice(&self.step.to_le_bytes());
        w.extend_from_slice(&self.seed.to_le_bytes());
        for r in [&self.rng_diffusion, &self.rng_context] {
            w.extend_from_slice(&r.seed);
            w.extend_from_slice(&r.stream.to_le_bytes());
            w.extend_from_slice(&r.word_pos.to_le_bytes());
        }
        w.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, v) in &self.params {
            put_str(&mut w, name);
            w.extend_from_slice(&(v.ndim() as u32).to_le_bytes());
            for &d in v.shape() {
                w.extend_from_slice(&(d as u64).to_le_bytes());
            }
            put_values(&mut w, v);
        }
        w.extend_from_slice(&self.adam_t.to_le_bytes());
        for v in self.adam_m.iter().chain(&self.adam_v) {
            put_values(&mut w, v);
        }
        match &self.palette {
            None => w.push(0),
            Some(p) => {
                w.push(1);
                w.extend_from_slice(&(p.len() as u32).to_le_bytes());
                w.extend_from_slice(&(p.channels as u32).to_le_bytes());
                for c in p.colors.iter().flatten() {
                    w.extend_from_slice(&c.to_le_bytes());
                }
                match &p.warning {
                    None => w.push(0),
                    Some(s) => {
                        w.push(1);
                        put_str(&mut w, s);
                    }
                }
            }
        }
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { b: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(HarnessError::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(HarnessError::Checkpoint(format!(
                "unsupported checkpoint version {version}, this build reads version {VERSION}"
            )));
        }
        let dtype = r.str()?;
        if dtype != F::DTYPE {
            return Err(HarnessError::Checkpoint(format!("checkpoint holds {dtype}, expected {}", F::DTYPE)));
        }
        let config_json = r.str()?;
        let config_hash = r.str()?;
        let step = r.u64()?;
        let seed = r.u64()?;
        let mut rng = || -> Result<RngState> {
            let s: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
            Ok(RngState { seed: s, stream: r.u64()?, word_pos: u128::from_le_bytes(r.take(16)?.try_into().expect("16")) })
        };
        let rng_diffusion = rng()?;
        let rng_context = rng()?;
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.str()?;
            let ndim = r.u32()? as usize;
            let dims = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let v = r.values::<F>(&dims)?;
            params.push((name, v));
        }
        let adam_t = r.u64()?;
        let mut moments = || -> Result<Vec<ArrayD<F>>> {
            params.iter().map(|(_, p)| r.values::<F>(p.shape())).collect()
        };
        let adam_m = moments()?;
        let adam_v = moments()?;
        let palette = match r.u8()? {
            0 => None,
            1 => {
                let k = r.u32()? as usize;
                let c = r.u32()? as usize;
                let mut colors = vec![vec![0.0f32; c]; k];
                for v in colors.iter_mut().flatten() {
                    *v = f32::from_le_bytes(r.take(4)?.try_into().expect("4"));
                }
                let warning = match r.u8()? {
                    0 => None,
                    _ => Some(r.str()?),
                };
                Some(Palette { channels: c, colors, warning })
            }
            f => return Err(HarnessError::Checkpoint(format!("bad palette flag {f}"))),
        };
        if r.pos != bytes.len() {
            return Err(HarnessError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            version,
            config_json,
            config_hash,
            step,
            seed,
            rng_diffusion,
            rng_context,
            params,
            adam_t,
            adam_m,
            adam_v,
            palette,
        })
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
        }
        std::fs::write(path, &bytes).map_err(|e| HarnessError::io(path, e))?;
        Ok(content_hash(&bytes))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let path = resolve_path(path);
        let bytes = std::fs::read(&path).map_err(|e| HarnessError::io(&path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            HarnessError::Checkpoint(m) => HarnessError::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

fn put_str(w: &mut Vec<u8>, s: &str) {
    w.extend_from_slice(&(s.len() as u64).to_le_bytes());
    w.extend_from_slice(s.as_bytes());
}

fn put_values<F: Scalar>(w: &mut Vec<u8>, v: &ArrayD<F>) {
    for &x in v.iter() {
        x.write_le(w);
    }
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.b.len());
        let end = end.ok_or_else(|| HarnessError::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.b[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8")))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u64()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| HarnessError::Checkpoint("invalid UTF-8".into()))
    }

    fn values<F: Scalar>(&mut self, dims: &[usize]) -> Result<ArrayD<F>> {
        let n: usize = dims.iter().product();
        let raw = self.take(n.checked_mul(F::BYTES).ok_or_else(|| HarnessError::Checkpoint("size overflow".into()))?)?;
        let vals: Vec<F> = raw.chunks_exact(F::BYTES).map(F::read_le).collect();
        Ok(ArrayD::from_shape_vec(IxDyn(dims), vals).expect("length matches dims"))
    }
}
