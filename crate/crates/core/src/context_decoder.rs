//! Context-prediction heads attached to the denoiser's feature tap.
//!
//! [`FeatureDecoder`] regresses all `K_n` neighbor values directly.
//! [`DistributionDecoder`] predicts a diagonal Gaussian per position and maps
//! reparameterized draws through a small network, so its size does not
//! depend on the neighborhood.
//!
//! Both heads refuse to run while an [`InferenceGuard`] is alive on the
//! current thread and count every invocation.

use std::cell::Cell;
use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::{Array1, Array2, ArrayD, ArrayView1, Ix2, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear, ParamStore};
use crate::scalar::Scalar;

thread_local! {
    static INFERENCE_DEPTH: Cell<usize> = const { Cell::new(0) };
}

/// Marks the current thread as sampling; context heads error while it lives.
pub struct InferenceGuard {
    _private: (),
}

impl InferenceGuard {
    pub fn enter() -> Self {
        INFERENCE_DEPTH.with(|d| d.set(d.get() + 1));
        Self { _private: () }
    }
}

impl Drop for InferenceGuard {
    fn drop(&mut self) {
        INFERENCE_DEPTH.with(|d| d.set(d.get() - 1));
    }
}

pub fn inference_active() -> bool {
    INFERENCE_DEPTH.with(|d| d.get() > 0)
}

/// `Linear -> LayerNorm -> SiLU` blocks followed by a linear projection.
#[derive(Clone, Debug, PartialEq)]
pub struct Fnn {
    blocks: Vec<(Linear, LayerNorm)>,
    out: Linear,
}

impl Fnn {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        inp: usize,
        hidden: &[usize],
        out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut blocks = Vec::with_capacity(hidden.len());
        let mut prev = inp;
        for (i, &h) in hidden.iter().enumerate() {
            let lin = Linear::new(store, &format!("{name}.block{i}.linear"), prev, h, rng)?;
            let ln = LayerNorm::new(store, &format!("{name}.block{i}.norm"), h)?;
            blocks.push((lin, ln));
            prev = h;
        }
        let out = Linear::new(store, &format!("{name}.out"), prev, out, rng)?;
        Ok(Self { blocks, out })
    }

    pub fn param_count(inp: usize, hidden: &[usize], out: usize) -> usize {
        let mut prev = inp;
        let mut n = 0;
        for &h in hidden {
            n += Linear::param_count(prev, h) + LayerNorm::param_count(h);
            prev = h;
        }
        n + Linear::param_count(prev, out)
    }

    pub fn output(&self) -> &Linear {
        &self.out
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let mut h = x;
        for (lin, ln) in &self.blocks {
            h = lin.forward(tape, store, h)?;
            h = ln.forward(tape, store, h)?;
            h = tape.silu(h);
        }
        self.out.forward(tape, store, h)
    }
}

fn default_hidden() -> Vec<usize> {
    vec![64, 64]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureDecoderCfg {
    /// Target channel dimension.
    pub d: usize,
    pub k_n: usize,
    /// Width of the tap features fed in.
    pub point_dim: usize,
    pub t_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
}

impl FeatureDecoderCfg {
    pub fn output_dim(&self) -> usize {
        self.k_n * self.d
    }

    pub fn param_count(&self) -> usize {
        Fnn::param_count(self.point_dim + self.t_dim, &self.hidden, self.output_dim())
    }
}

fn logvar_min() -> f64 {
    -10.0
}

fn logvar_max() -> f64 {
    4.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistributionDecoderCfg {
    pub d: usize,
    pub point_dim: usize,
    pub t_dim: usize,
    #[serde(default = "default_hidden")]
    pub mu_hidden: Vec<usize>,
    #[serde(default = "default_hidden")]
    pub sigma_hidden: Vec<usize>,
    /// `None` makes the latent-to-output map the identity.
    #[serde(default = "n_hidden_default")]
    pub n_hidden: Option<Vec<usize>>,
    #[serde(default = "logvar_min")]
    pub logvar_min: f64,
    #[serde(default = "logvar_max")]
    pub logvar_max: f64,
}

fn n_hidden_default() -> Option<Vec<usize>> {
    Some(default_hidden())
}

impl DistributionDecoderCfg {
    pub fn param_count(&self) -> usize {
        let inp = self.point_dim + self.t_dim;
        Fnn::param_count(inp, &self.mu_hidden, self.d)
            + Fnn::param_count(inp, &self.sigma_hidden, self.d)
            + self
                .n_hidden
                .as_ref()
                .map_or(0, |h| Fnn::param_count(self.d, h, self.d))
    }
}

fn check_inputs<F: Scalar>(
    tape: &Tape<F>,
    points: Var,
    t_emb: Var,
    point_dim: usize,
    t_dim: usize,
) -> Result<()> {
    let (ps, ts) = (tape.shape(points), tape.shape(t_emb));
    if ps.len() != 2 || ps[1] != point_dim || ts.len() != 2 || ts[1] != t_dim || ps[0] != ts[0] {
        return Err(Error::Shape(format!(
            "head expects points [P,{point_dim}] and t_emb [P,{t_dim}], got {ps:?} and {ts:?}"
        )));
    }
    Ok(())
}

fn enter_call(calls: &AtomicUsize) -> Result<()> {
    calls.fetch_add(1, Ordering::Relaxed);
    if inference_active() {
        return Err(Error::ContextHeadDuringInference);
    }
    Ok(())
}

#[derive(Debug)]
pub struct FeatureDecoder {
    pub cfg: FeatureDecoderCfg,
    net: Fnn,
    calls: AtomicUsize,
}

impl Clone for FeatureDecoder {
    fn clone(&self) -> Self {
        Self {
            cfg: self.cfg.clone(),
            net: self.net.clone(),
            calls: AtomicUsize::new(self.calls()),
        }
    }
}

impl FeatureDecoder {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        cfg: FeatureDecoderCfg,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.d == 0 || cfg.k_n == 0 {
            return Err(Error::param("d", "feature decoder needs d >= 1 and K_n >= 1"));
        }
        let net = Fnn::new(
            store,
            name,
            cfg.point_dim + cfg.t_dim,
            &cfg.hidden,
            cfg.output_dim(),
            rng,
        )?;
        Ok(Self { cfg, net, calls: AtomicUsize::new(0) })
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn net(&self) -> &Fnn {
        &self.net
    }

    /// `points: [P, point_dim]`, `t_emb: [P, t_dim]` to `[P, K_n, d]`.
    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        points: Var,
        t_emb: Var,
    ) -> Result<Var> {
        enter_call(&self.calls)?;
        check_inputs(tape, points, t_emb, self.cfg.point_dim, self.cfg.t_dim)?;
        let p = tape.shape(points)[0];
        let x = tape.concat(&[points, t_emb], 1)?;
        let y = self.net.forward(tape, store, x)?;
        tape.reshape(y, &[p, self.cfg.k_n, self.cfg.d])
    }
}

/// Gaussian parameters and their mapped draws for a batch of positions.
#[derive(Clone, Copy, Debug)]
pub struct DistributionOutput {
    /// `[P * q, d]`, row `p * q + j` is draw `j` of position `p`.
    pub samples: Var,
    /// `[P, d]`
    pub mu: Var,
    /// `[P, d]`, already clamped.
    pub logvar: Var,
}

#[derive(Debug)]
pub struct DistributionDecoder {
    pub cfg: DistributionDecoderCfg,
    mu: Fnn,
    sigma: Fnn,
    n: Option<Fnn>,
    calls: AtomicUsize,
}

impl Clone for DistributionDecoder {
    fn clone(&self) -> Self {
        Self {
            cfg: self.cfg.clone(),
            mu: self.mu.clone(),
            sigma: self.sigma.clone(),
            n: self.n.clone(),
            calls: AtomicUsize::new(self.calls()),
        }
    }
}

impl DistributionDecoder {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        cfg: DistributionDecoderCfg,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.d == 0 {
            return Err(Error::param("d", "distribution decoder needs d >= 1"));
        }
        if !(cfg.logvar_min < cfg.logvar_max) {
            return Err(Error::param("logvar_min", "must be below logvar_max"));
        }
        let inp = cfg.point_dim + cfg.t_dim;
        let mu = Fnn::new(store, &format!("{name}.mu"), inp, &cfg.mu_hidden, cfg.d, rng)?;
        let sigma = Fnn::new(store, &format!("{name}.sigma"), inp, &cfg.sigma_hidden, cfg.d, rng)?;
        let n = match &cfg.n_hidden {
            Some(h) => Some(Fnn::new(store, &format!("{name}.n"), cfg.d, h, cfg.d, rng)?),
            None => None,
        };
        Ok(Self { cfg, mu, sigma, n, calls: AtomicUsize::new(0) })
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn mu_net(&self) -> &Fnn {
        &self.mu
    }

    pub fn sigma_net(&self) -> &Fnn {
        &self.sigma
    }

    /// Draws `q` latent samples per position (rows of `points`).
    pub fn forward<F: Scalar, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        points: Var,
        t_emb: Var,
        q: usize,
        rng: &mut R,
    ) -> Result<DistributionOutput> {
        enter_call(&self.calls)?;
        if q == 0 {
            return Err(Error::param("q", "must be >= 1"));
        }
        check_inputs(tape, points, t_emb, self.cfg.point_dim, self.cfg.t_dim)?;
        let (p, d) = (tape.shape(points)[0], self.cfg.d);
        let x = tape.concat(&[points, t_emb], 1)?;
        let mu = self.mu.forward(tape, store, x)?;
        let raw = self.sigma.forward(tape, store, x)?;
        for (name, v) in [("mean", mu), ("log-variance", raw)] {
            let arr = tape.value(v);
            if let Some(idx) = arr.iter().position(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!(
                    "context head {name} at position {}",
                    idx / d
                )));
            }
        }
        let logvar = tape.clamp(raw, F::of(self.cfg.logvar_min), F::of(self.cfg.logvar_max));
        let half = tape.scale(logvar, F::of(0.5));
        let std = tape.exp(half);
        let z = ArrayD::from_shape_fn(IxDyn(&[p, q, d]), |_| F::standard_normal(rng));
        let z = tape.constant(z);
        let mu3 = tape.reshape(mu, &[p, 1, d])?;
        let std3 = tape.reshape(std, &[p, 1, d])?;
        let noise = tape.mul(std3, z)?;
        let xi = tape.add(mu3, noise)?;
        let xi = tape.reshape(xi, &[p * q, d])?;
        let samples = match &self.n {
            Some(n) => n.forward(tape, store, xi)?,
            None => xi,
        };
        Ok(DistributionOutput { samples, mu, logvar })
    }
}

#[derive(Clone, Debug)]
pub enum ContextDecoder {
    Feature(FeatureDecoder),
    Distribution(DistributionDecoder),
}

impl ContextDecoder {
    pub fn calls(&self) -> usize {
        match self {
            Self::Feature(f) => f.calls(),
            Self::Distribution(d) => d.calls(),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Self::Feature(f) => f.cfg.param_count(),
            Self::Distribution(d) => d.cfg.param_count(),
        }
    }

    pub fn target_dim(&self) -> usize {
        match self {
            Self::Feature(f) => f.cfg.d,
            Self::Distribution(d) => d.cfg.d,
        }
    }
}

fn row_inputs<F: Scalar>(tape: &mut Tape<F>, point: ArrayView1<'_, F>, t_emb: ArrayView1<'_, F>) -> (Var, Var) {
    let p = tape.constant(point.to_owned().insert_axis(ndarray::Axis(0)).into_dyn());
    let t = tape.constant(t_emb.to_owned().insert_axis(ndarray::Axis(0)).into_dyn());
    (p, t)
}

/// Neighbor predictions for a single tap vector, `K_n × d`.
pub fn decode_features<F: Scalar>(
    decoder: &FeatureDecoder,
    store: &ParamStore<F>,
    point: ArrayView1<'_, F>,
    t_emb: ArrayView1<'_, F>,
) -> Result<Array2<F>> {
    let mut tape = Tape::new();
    let (p, t) = row_inputs(&mut tape, point, t_emb);
    let y = decoder.forward(&mut tape, store, p, t)?;
    let (k, d) = (decoder.cfg.k_n, decoder.cfg.d);
    Ok(tape
        .value(y)
        .clone()
        .into_shape_with_order(IxDyn(&[k, d]))
        .expect("decoder output")
        .into_dimensionality::<Ix2>()
        .expect("2-D"))
}

/// `q` mapped draws for a single tap vector, `q × d`.
pub fn decode_distribution_samples<F: Scalar, R: Rng + ?Sized>(
    decoder: &DistributionDecoder,
    store: &ParamStore<F>,
    point: ArrayView1<'_, F>,
    t_emb: ArrayView1<'_, F>,
    q: usize,
    rng: &mut R,
) -> Result<Array2<F>> {
    let mut tape = Tape::new();
    let (p, t) = row_inputs(&mut tape, point, t_emb);
    let out = decoder.forward(&mut tape, store, p, t, q, rng)?;
    Ok(tape
        .value(out.samples)
        .clone()
        .into_dimensionality::<Ix2>()
        .expect("2-D"))
}

/// Gaussian parameters `(μ, clamped log σ²)` for one tap vector.
pub fn gaussian_params<F: Scalar>(
    decoder: &DistributionDecoder,
    store: &ParamStore<F>,
    point: ArrayView1<'_, F>,
    t_emb: ArrayView1<'_, F>,
) -> Result<(Array1<F>, Array1<F>)> {
    let mut tape = Tape::new();
    let (p, t) = row_inputs(&mut tape, point, t_emb);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = decoder.forward(&mut tape, store, p, t, 1, &mut rng)?;
    let row = |v: Var| tape.value(v).iter().copied().collect::<Array1<F>>();
    Ok((row(out.mu), row(out.logvar)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feature_cfg(k_n: usize) -> FeatureDecoderCfg {
        FeatureDecoderCfg { d: 3, k_n, point_dim: 8, t_dim: 4, hidden: vec![16, 12] }
    }

    fn dist_cfg(n_hidden: Option<Vec<usize>>) -> DistributionDecoderCfg {
        DistributionDecoderCfg {
            d: 3,
            point_dim: 8,
            t_dim: 4,
            mu_hidden: vec![16, 16],
            sigma_hidden: vec![16, 16],
            n_hidden,
            logvar_min: -10.0,
            logvar_max: 4.0,
        }
    }

    #[test]
    fn feature_output_shape_and_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let dec = FeatureDecoder::new(&mut store, "context", feature_cfg(48), &mut rng).unwrap();
        assert_eq!(store.num_scalars(), dec.cfg.param_count());
        let point = Array1::from_elem(8, 0.3);
        let temb = Array1::from_elem(4, -0.1);
        let out = decode_features(&dec, &store, point.view(), temb.view()).unwrap();
        assert_eq!(out.dim(), (48, 3));
        assert_eq!(dec.calls(), 1);

        let growth = feature_cfg(24).param_count() - feature_cfg(8).param_count();
        assert_eq!(growth, (24 - 8) * 3 * 12 + (24 - 8) * 3);
        assert!(feature_cfg(24).param_count() > feature_cfg(8).param_count());
    }

    #[test]
    fn zeroed_output_layer_predicts_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let dec = FeatureDecoder::new(&mut store, "context", feature_cfg(8), &mut rng).unwrap();
        let out = dec.net().output();
        for id in [out.w, out.b] {
            store.get_mut(id).fill(0.0);
        }
        let point = Array1::from_elem(8, 1.0);
        let temb = Array1::from_elem(4, 1.0);
        let pred = decode_features(&dec, &store, point.view(), temb.view()).unwrap();
        assert!(pred.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dimension_mismatch_is_a_shape_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let dec = FeatureDecoder::new(&mut store, "context", feature_cfg(8), &mut rng).unwrap();
        let point = Array1::from_elem(7, 1.0);
        let temb = Array1::from_elem(4, 1.0);
        assert!(matches!(
            decode_features(&dec, &store, point.view(), temb.view()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn distribution_count_is_stride_free() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f32>::new();
        let cfg = dist_cfg(Some(vec![8, 8]));
        DistributionDecoder::new(&mut store, "context", cfg.clone(), &mut rng).unwrap();
        assert_eq!(store.num_scalars(), cfg.param_count());
    }

    #[test]
    fn collapsed_variance_returns_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::<f64>::new();
        let dec = DistributionDecoder::new(&mut store, "context", dist_cfg(None), &mut rng).unwrap();
        store.get_mut(dec.sigma_net().output().b).fill(-1e3);
        store.get_mut(dec.sigma_net().output().w).fill(0.0);
        let point = Array1::from_shape_fn(8, |i| i as f64 * 0.1);
        let temb = Array1::from_elem(4, 0.5);
        let (mu, logvar) = gaussian_params(&dec, &store, point.view(), temb.view()).unwrap();
        assert!(logvar.iter().all(|&v| v == -10.0));
        let s = decode_distribution_samples(&dec, &store, point.view(), temb.view(), 16, &mut rng).unwrap();
        for row in s.rows() {
            for (a, b) in row.iter().zip(mu.iter()) {
                assert!((a - b).abs() < 0.05);
            }
        }
    }

    #[test]
    fn fixed_seed_reproduces_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f32>::new();
        let dec = DistributionDecoder::new(&mut store, "context", dist_cfg(Some(vec![8])), &mut rng).unwrap();
        let point = Array1::from_elem(8, 0.2f32);
        let temb = Array1::from_elem(4, 0.1f32);
        let a = decode_distribution_samples(&dec, &store, point.view(), temb.view(), 5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = decode_distribution_samples(&dec, &store, point.view(), temb.view(), 5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn heads_refuse_to_run_during_inference() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::<f64>::new();
        let dec = FeatureDecoder::new(&mut store, "context", feature_cfg(8), &mut rng).unwrap();
        let point = Array1::from_elem(8, 0.0);
        let temb = Array1::from_elem(4, 0.0);
        {
            let _g = InferenceGuard::enter();
            assert!(matches!(
                decode_features(&dec, &store, point.view(), temb.view()),
                Err(Error::ContextHeadDuringInference)
            ));
        }
        assert!(!inference_active());
        assert!(decode_features(&dec, &store, point.view(), temb.view()).is_ok());
        assert_eq!(dec.calls(), 2);
    }
}
