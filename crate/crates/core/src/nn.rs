//! Parameter storage, layers built on the tape, and the Adam optimizer.

use std::collections::BTreeMap;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors in insertion order. Names are dotted paths whose
/// first segment is the namespace (`denoiser`, `context`).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<F> {
    names: Vec<String>,
    values: Vec<ArrayD<F>>,
    lookup: BTreeMap<String, usize>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            lookup: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<F>) -> Result<ParamId> {
        let name = name.into();
        if self.lookup.contains_key(&name) {
            return Err(Error::Inconsistency(format!("duplicate parameter {name}")));
        }
        self.lookup.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value.as_standard_layout().into_owned());
        Ok(ParamId(self.values.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<F> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<F> {
        &mut self.values[id.0]
    }

    /// Replaces a tensor, keeping its shape fixed.
    pub fn set(&mut self, id: ParamId, value: ArrayD<F>) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return Err(Error::Shape(format!(
                "parameter {} expects {:?}, got {:?}",
                self.names[id.0],
                self.values[id.0].shape(),
                value.shape()
            )));
        }
        self.values[id.0] = value.as_standard_layout().into_owned();
        Ok(())
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &ArrayD<F>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Scalar count of every tensor whose name starts with `namespace.`.
    pub fn num_scalars_in(&self, namespace: &str) -> usize {
        self.iter()
            .filter(|(_, n, _)| in_namespace(n, namespace))
            .map(|(_, _, v)| v.len())
            .sum()
    }

    pub fn flatten(&self) -> Vec<F> {
        self.values
            .iter()
            .flat_map(|v| v.iter().copied())
            .collect()
    }

    pub fn set_flat(&mut self, flat: &[F]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(Error::Shape(format!(
                "flat vector of {} for {} parameters",
                flat.len(),
                self.num_scalars()
            )));
        }
        let mut off = 0;
        for v in &mut self.values {
            let n = v.len();
            for (dst, &src) in v.iter_mut().zip(&flat[off..off + n]) {
                *dst = src;
            }
            off += n;
        }
        Ok(())
    }
}

pub fn in_namespace(name: &str, namespace: &str) -> bool {
    name.strip_prefix(namespace)
        .is_some_and(|rest| rest.starts_with('.'))
}

fn uniform<F: Scalar, R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> ArrayD<F> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| {
        F::of(rng.random_range(-bound..=bound))
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub inp: usize,
    pub out: usize,
}

impl Linear {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        inp: usize,
        out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / (inp.max(1) as f64).sqrt();
        let w = store.add(format!("{name}.w"), uniform(&[inp, out], bound, rng))?;
        let b = store.add(format!("{name}.b"), uniform(&[out], bound, rng))?;
        Ok(Self { w, b, inp, out })
    }

    pub fn zeros<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        inp: usize,
        out: usize,
    ) -> Result<Self> {
        let w = store.add(format!("{name}.w"), ArrayD::zeros(IxDyn(&[inp, out])))?;
        let b = store.add(format!("{name}.b"), ArrayD::zeros(IxDyn(&[out])))?;
        Ok(Self { w, b, inp, out })
    }

    pub fn param_count(inp: usize, out: usize) -> usize {
        inp * out + out
    }

    /// `x: [P, inp] -> [P, out]`.
    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let y = tape.matmul(x, w)?;
        tape.add(y, b)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub inp: usize,
    pub out: usize,
    pub kernel: usize,
}

impl Conv2d {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        inp: usize,
        out: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::param("kernel", format!("must be odd, got {kernel}")));
        }
        let bound = 1.0 / ((inp * kernel * kernel).max(1) as f64).sqrt();
        let w = store.add(
            format!("{name}.w"),
            uniform(&[out, inp, kernel, kernel], bound, rng),
        )?;
        let b = store.add(format!("{name}.b"), uniform(&[out], bound, rng))?;
        Ok(Self { w, b, inp, out, kernel })
    }

    pub fn param_count(inp: usize, out: usize, kernel: usize) -> usize {
        out * inp * kernel * kernel + out
    }

    /// Same-size convolution of `[N, inp, H, W]`.
    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let y = tape.conv2d(x, w, self.kernel / 2)?;
        let b = tape.reshape(b, &[1, self.out, 1, 1])?;
        tape.add(y, b)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
    pub channels: usize,
    pub eps: f64,
}

impl GroupNorm {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        groups: usize,
        channels: usize,
    ) -> Result<Self> {
        if groups == 0 || channels % groups != 0 {
            return Err(Error::param(
                "groups",
                format!("{groups} groups do not divide {channels} channels"),
            ));
        }
        let gamma = store.add(format!("{name}.gamma"), ArrayD::ones(IxDyn(&[channels])))?;
        let beta = store.add(format!("{name}.beta"), ArrayD::zeros(IxDyn(&[channels])))?;
        Ok(Self { gamma, beta, groups, channels, eps: 1e-5 })
    }

    pub fn param_count(channels: usize) -> usize {
        2 * channels
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.channels {
            return Err(Error::Shape(format!("group norm over {} channels got {s:?}", self.channels)));
        }
        let g = tape.reshape(x, &[s[0], self.groups, s[1] / self.groups * s[2] * s[3]])?;
        let normed = normalize_last(tape, g, self.eps)?;
        let normed = tape.reshape(normed, &s)?;
        let gamma = tape.param(store, self.gamma);
        let beta = tape.param(store, self.beta);
        let gamma = tape.reshape(gamma, &[1, self.channels, 1, 1])?;
        let beta = tape.reshape(beta, &[1, self.channels, 1, 1])?;
        let y = tape.mul(normed, gamma)?;
        tape.add(y, beta)
    }
}

/// Zero-mean, unit-variance normalization along the last axis.
fn normalize_last<F: Scalar>(tape: &mut Tape<F>, x: Var, eps: f64) -> Result<Var> {
    let ax = tape.shape(x).len() - 1;
    let mean = tape.mean_axis(x, ax);
    let centered = tape.sub(x, mean)?;
    let sq = tape.square(centered);
    let var = tape.mean_axis(sq, ax);
    let var = tape.shift(var, F::of(eps));
    let std = tape.sqrt(var);
    tape.div(centered, std)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, dim: usize) -> Result<Self> {
        let gamma = store.add(format!("{name}.gamma"), ArrayD::ones(IxDyn(&[dim])))?;
        let beta = store.add(format!("{name}.beta"), ArrayD::zeros(IxDyn(&[dim])))?;
        Ok(Self { gamma, beta, dim, eps: 1e-5 })
    }

    pub fn param_count(dim: usize) -> usize {
        2 * dim
    }

    /// Normalizes `[P, dim]` per row.
    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let normed = normalize_last(tape, x, self.eps)?;
        let gamma = tape.param(store, self.gamma);
        let beta = tape.param(store, self.beta);
        let y = tape.mul(normed, gamma)?;
        tape.add(y, beta)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub table: ParamId,
    pub num: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        num: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let table = store.add(format!("{name}.table"), uniform(&[num, dim], 1.0, rng))?;
        Ok(Self { table, num, dim })
    }

    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        idx: &[usize],
    ) -> Result<Var> {
        let t = tape.param(store, self.table);
        tape.gather_rows(t, idx)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamCfg {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamCfg {
    fn default() -> Self {
        Self { lr: 2e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction. First and second moments are kept per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<F> {
    pub cfg: AdamCfg,
    pub m: Vec<ArrayD<F>>,
    pub v: Vec<ArrayD<F>>,
    pub t: u64,
}

impl<F: Scalar> Adam<F> {
    pub fn new(store: &ParamStore<F>, cfg: AdamCfg) -> Self {
        let zeros = || store.values.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect();
        Self { cfg, m: zeros(), v: zeros(), t: 0 }
    }

    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &Gradients<F>) {
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t.min(i32::MAX as u64) as i32);
        let c2 = 1.0 - b2.powi(self.t.min(i32::MAX as u64) as i32);
        let (b1f, b2f) = (F::of(b1), F::of(b2));
        let (ob1, ob2) = (F::of(1.0 - b1), F::of(1.0 - b2));
        let step = F::of(self.cfg.lr / c1);
        let c2 = F::of(c2);
        let eps = F::of(self.cfg.eps);
        if self.cfg.lr == 0.0 {
            return;
        }
        for (id, g) in grads.params() {
            let i = id.0;
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let p = &mut store.values[i];
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1f * *m + ob1 * g;
                    *v = b2f * *v + ob2 * g * g;
                    *p -= step * *m / ((*v / c2).sqrt() + eps);
                });
        }
    }
}
