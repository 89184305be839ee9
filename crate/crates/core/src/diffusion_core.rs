//! Training objectives, the λ_t weight, the Cauchy bound check and the
//! optimizer step.
//!
//! Per example, both the point term and the context term are sums over
//! spatial positions; batch quantities are means over examples. The context
//! term of the distribution head at one position is the exact empirical W2²
//! between `q` decoded draws and `q` neighbors drawn from the ground truth,
//! with the optimal matching treated as a constant for differentiation.

use std::collections::HashMap;

use ndarray::{Array2, Array3, Array4, ArrayD, ArrayView3, ArrayView4, Axis, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::context_decoder::{
    ContextDecoder, DistributionDecoder, DistributionDecoderCfg, FeatureDecoder, FeatureDecoderCfg,
};
use crate::corruption::{ContinuousSchedule, DiscreteTransition, TokenMap};
use crate::denoiser::{time_embedding_rows, Denoiser, DenoiserCfg, DenoiserInput, DenoiserMode};
use crate::error::{Error, Result};
use crate::neighborhood::{neighbor_mean_pool, NeighborIndex};
use crate::nn::{Adam, AdamCfg, ParamStore};
use crate::scalar::Scalar;
use crate::set_losses::{hungarian_w2, SetReduction};

/// Weight of the context term as a function of `t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LambdaSchedule {
    Constant { value: f64 },
    /// Linear from `start` at `t = 1` to `end` at `t = T`.
    Linear { start: f64, end: f64 },
}

impl Default for LambdaSchedule {
    fn default() -> Self {
        LambdaSchedule::Constant { value: 0.5 }
    }
}

/// `λ_t`, clamped to `[0, 1]`.
pub fn lambda_schedule(t: usize, steps: usize, schedule: &LambdaSchedule) -> f64 {
    let v = match *schedule {
        LambdaSchedule::Constant { value } => value,
        LambdaSchedule::Linear { start, end } => {
            if steps <= 1 {
                start
            } else {
                let u = (t.saturating_sub(1)) as f64 / (steps - 1) as f64;
                start + (end - start) * u
            }
        }
    };
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderVariant {
    #[default]
    Distribution,
    Feature,
}

/// How the continuous point term is weighted across `t`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointWeighting {
    /// Plain `‖x̂_0 − x_0‖²`.
    #[default]
    Simple,
    /// `c_0(t)² / (2σ_t²) · ‖x̂_0 − x_0‖²`, the posterior-mean form.
    PosteriorMean,
}

fn default_stride() -> usize {
    3
}
fn default_q() -> usize {
    4
}
fn default_head_hidden() -> Vec<usize> {
    vec![64, 64]
}
fn default_latent_hidden() -> Option<Vec<usize>> {
    Some(vec![32])
}
fn default_logvar_min() -> f64 {
    -10.0
}
fn default_logvar_max() -> f64 {
    4.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContextCfg {
    /// Neighborhood stride; 0 disables the context head.
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default = "default_q")]
    pub q: usize,
    #[serde(default)]
    pub variant: DecoderVariant,
    #[serde(default)]
    pub lambda: LambdaSchedule,
    #[serde(default)]
    pub reduction: SetReduction,
    /// Widths of the head's non-linear blocks.
    #[serde(default = "default_head_hidden")]
    pub hidden: Vec<usize>,
    /// Widths of the latent-to-output network; `None` for the identity.
    #[serde(default = "default_latent_hidden")]
    pub latent_hidden: Option<Vec<usize>>,
    #[serde(default = "default_logvar_min")]
    pub logvar_min: f64,
    #[serde(default = "default_logvar_max")]
    pub logvar_max: f64,
}

impl Default for ContextCfg {
    fn default() -> Self {
        Self {
            stride: default_stride(),
            q: default_q(),
            variant: DecoderVariant::default(),
            lambda: LambdaSchedule::default(),
            reduction: SetReduction::default(),
            hidden: default_head_hidden(),
            latent_hidden: default_latent_hidden(),
            logvar_min: default_logvar_min(),
            logvar_max: default_logvar_max(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelCfg {
    #[serde(default)]
    pub denoiser: DenoiserCfg,
    #[serde(default)]
    pub context: ContextCfg,
    #[serde(default)]
    pub point_weighting: PointWeighting,
}

impl ModelCfg {
    /// Channel dimension `d` of the context targets.
    pub fn target_dim(&self) -> usize {
        match self.denoiser.mode {
            DenoiserMode::Continuous => self.denoiser.in_channels,
            DenoiserMode::Discrete => self.denoiser.token_emb_dim,
        }
    }

    pub fn feature_cfg(&self, k_n: usize) -> FeatureDecoderCfg {
        FeatureDecoderCfg {
            d: self.target_dim(),
            k_n,
            point_dim: self.denoiser.tap_channels(),
            t_dim: self.denoiser.time_emb_dim,
            hidden: self.context.hidden.clone(),
        }
    }

    pub fn distribution_cfg(&self) -> DistributionDecoderCfg {
        DistributionDecoderCfg {
            d: self.target_dim(),
            point_dim: self.denoiser.tap_channels(),
            t_dim: self.denoiser.time_emb_dim,
            mu_hidden: self.context.hidden.clone(),
            sigma_hidden: self.context.hidden.clone(),
            n_hidden: self.context.latent_hidden.clone(),
            logvar_min: self.context.logvar_min,
            logvar_max: self.context.logvar_max,
        }
    }
}

/// A `ChaCha8Rng` on an explicit stream of `seed`.
pub fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

pub const STREAM_DIFFUSION: u64 = 0;
pub const STREAM_CONTEXT: u64 = 1;
pub const STREAM_INIT_DENOISER: u64 = 2;
pub const STREAM_INIT_CONTEXT: u64 = 3;

/// Denoiser, optional context head and their parameters.
#[derive(Clone, Debug)]
pub struct ConPreDiff<F> {
    pub cfg: ModelCfg,
    pub denoiser: Denoiser,
    pub head: Option<ContextDecoder>,
    pub neighbors: Option<NeighborIndex>,
    pub params: ParamStore<F>,
}

impl<F: Scalar> ConPreDiff<F> {
    pub const CONTEXT_NAMESPACE: &'static str = "context";

    pub fn new(cfg: ModelCfg, seed: u64) -> Result<Self> {
        if cfg.context.q == 0 {
            return Err(Error::param("q", "must be >= 1"));
        }
        let mut params = ParamStore::new();
        let denoiser = Denoiser::new(
            &mut params,
            cfg.denoiser.clone(),
            &mut rng_stream(seed, STREAM_INIT_DENOISER),
        )?;
        let (head, neighbors) = if cfg.context.stride == 0 {
            (None, None)
        } else {
            let index = NeighborIndex::new(cfg.context.stride)?;
            let mut rng = rng_stream(seed, STREAM_INIT_CONTEXT);
            let ns = Self::CONTEXT_NAMESPACE;
            let head = match cfg.context.variant {
                DecoderVariant::Feature => ContextDecoder::Feature(FeatureDecoder::new(
                    &mut params,
                    ns,
                    cfg.feature_cfg(index.count()),
                    &mut rng,
                )?),
                DecoderVariant::Distribution => ContextDecoder::Distribution(
                    DistributionDecoder::new(&mut params, ns, cfg.distribution_cfg(), &mut rng)?,
                ),
            };
            (Some(head), Some(index))
        };
        Ok(Self { cfg, denoiser, head, neighbors, params })
    }

    pub fn head_calls(&self) -> usize {
        self.head.as_ref().map_or(0, |h| h.calls())
    }

    pub fn denoiser_param_count(&self) -> usize {
        self.params.num_scalars_in(Denoiser::NAMESPACE)
    }

    pub fn head_param_count(&self) -> usize {
        self.params.num_scalars_in(Self::CONTEXT_NAMESPACE)
    }
}

/// Scalar diagnostics of one objective evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub point_term: f64,
    pub context_term: f64,
    pub lambda_t: f64,
    pub total: f64,
    /// Context cost per position, row-major over `(batch, y, x)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position_costs: Option<Vec<f64>>,
}

impl LossBreakdown {
    fn from_examples(point: &[f64], context: &[f64], lambda: &[f64]) -> Self {
        let n = point.len() as f64;
        let p = point.iter().sum::<f64>() / n;
        let c = context.iter().sum::<f64>() / n;
        let weighted: f64 = context.iter().zip(lambda).map(|(c, l)| c * l).sum::<f64>() / n;
        let csum: f64 = context.iter().sum();
        let lambda_t = if csum > 0.0 {
            lambda.iter().zip(context).map(|(l, c)| l * c).sum::<f64>() / csum
        } else {
            lambda.iter().sum::<f64>() / n
        };
        Self {
            point_term: p,
            context_term: c,
            lambda_t,
            total: p + weighted,
            position_costs: None,
        }
    }
}

/// The tape graph of an objective plus its diagnostics.
#[derive(Clone, Debug)]
pub struct Objective {
    pub total: Var,
    pub breakdown: LossBreakdown,
    pub per_example: Vec<LossBreakdown>,
    /// Optimal matchings per position (distribution head only).
    pub assignments: Vec<Vec<usize>>,
}

/// Channel-last ground-truth values the neighbors are read from.
struct Targets<F> {
    /// `[N, H, W, d]`
    values: Array4<F>,
}

struct ContextTerm {
    per_example: Var,
    position_costs: Vec<f64>,
    assignments: Vec<Vec<usize>>,
}

fn context_term<F: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<F>,
    model: &ConPreDiff<F>,
    tap: Var,
    ts: &[usize],
    targets: &Targets<F>,
    rng: &mut R,
) -> Result<ContextTerm> {
    let head = model.head.as_ref().expect("caller checked the head");
    let index = model.neighbors.as_ref().expect("head implies neighbors");
    let (n, h, w, d) = targets.values.dim();
    let hw = h * w;
    let p = n * hw;
    let ct = tape.shape(tap)[1];
    let points = tape.permute(tap, &[0, 2, 3, 1])?;
    let points = tape.reshape(points, &[p, ct])?;
    let t_rows: Vec<usize> = ts.iter().flat_map(|&t| std::iter::repeat_n(t, hw)).collect();
    let temb = tape.constant(time_embedding_rows(&t_rows, model.cfg.denoiser.time_emb_dim)?);

    let target_row = |b: usize, y: usize, x: usize, k: usize| {
        let (ny, nx) = index.resolve(h, w, y, x, k);
        targets.values.slice(ndarray::s![b, ny, nx, ..])
    };

    match head {
        ContextDecoder::Distribution(dec) => {
            let q = model.cfg.context.q;
            let out = dec.forward(tape, &model.params, points, temb, q, rng)?;
            let samples = tape.value(out.samples).clone();
            let samples = samples.into_dimensionality::<ndarray::Ix2>().expect("2-D samples");
            let mut target = Array2::<F>::zeros((p * q, d));
            let mut gather = Vec::with_capacity(p * q);
            let mut costs = Vec::with_capacity(p);
            let mut assignments = Vec::with_capacity(p);
            let reduction = model.cfg.context.reduction;
            for b in 0..n {
                for y in 0..h {
                    for x in 0..w {
                        let pos = (b * h + y) * w + x;
                        let slots = index.sample_slots(q, rng);
                        let mut block = Array2::<F>::zeros((q, d));
                        for (j, &k) in slots.iter().enumerate() {
                            block.row_mut(j).assign(&target_row(b, y, x, k));
                        }
                        let preds = samples.slice(ndarray::s![pos * q..(pos + 1) * q, ..]);
                        let m = hungarian_w2(block.view(), preds)?;
                        for j in 0..q {
                            target.row_mut(pos * q + j).assign(&block.row(j));
                            gather.push(pos * q + m.assignment[j]);
                        }
                        costs.push(reduction.apply(m.cost, q).as_f64());
                        assignments.push(m.assignment);
                    }
                }
            }
            let matched = tape.gather_rows(out.samples, &gather)?;
            let target = tape.constant(target.into_dyn());
            let diff = tape.sub(matched, target)?;
            let sq = tape.square(diff);
            let sq = tape.reshape(sq, &[n, hw * q * d])?;
            let per = tape.sum_axis(sq, 1);
            let per = tape.reshape(per, &[n])?;
            let per = match reduction {
                SetReduction::Sum => per,
                SetReduction::MeanOverSamples => tape.scale(per, F::one() / F::of_usize(q)),
            };
            Ok(ContextTerm { per_example: per, position_costs: costs, assignments })
        }
        ContextDecoder::Feature(dec) => {
            let k_n = index.count();
            let preds = dec.forward(tape, &model.params, points, temb)?;
            let mut target = Array3::<F>::zeros((p, k_n, d));
            for b in 0..n {
                for y in 0..h {
                    for x in 0..w {
                        let pos = (b * h + y) * w + x;
                        for k in 0..k_n {
                            target
                                .slice_mut(ndarray::s![pos, k, ..])
                                .assign(&target_row(b, y, x, k));
                        }
                    }
                }
            }
            let tconst = tape.constant(target.into_dyn());
            let diff = tape.sub(preds, tconst)?;
            let sq = tape.square(diff);
            let costs: Vec<f64> = tape
                .value(sq)
                .outer_iter()
                .map(|r| r.sum().as_f64())
                .collect();
            let sq = tape.reshape(sq, &[n, hw * k_n * d])?;
            let per = tape.sum_axis(sq, 1);
            let per = tape.reshape(per, &[n])?;
            Ok(ContextTerm { per_example: per, position_costs: costs, assignments: Vec::new() })
        }
    }
}

/// Combines per-example `[N]` point and context terms into the batch scalar.
fn assemble<F: Scalar>(
    tape: &mut Tape<F>,
    point: Var,
    context: Option<ContextTerm>,
    lambdas: &[f64],
    step_hint: &str,
) -> Result<Objective> {
    let n = lambdas.len();
    let point_vals: Vec<f64> = tape.value(point).iter().map(|v| v.as_f64()).collect();
    let (per_total, ctx_vals, costs, assignments) = match context {
        Some(ct) => {
            let lam = tape.constant(
                ArrayD::from_shape_vec(IxDyn(&[n]), lambdas.iter().map(|&l| F::of(l)).collect())
                    .expect("one weight per example"),
            );
            let weighted = tape.mul(ct.per_example, lam)?;
            let total = tape.add(point, weighted)?;
            let vals = tape.value(ct.per_example).iter().map(|v| v.as_f64()).collect();
            (total, vals, Some(ct.position_costs), ct.assignments)
        }
        None => (point, vec![0.0; n], None, Vec::new()),
    };
    let sum = tape.sum(per_total);
    let total = tape.scale(sum, F::one() / F::of_usize(n));
    let mut breakdown = LossBreakdown::from_examples(&point_vals, &ctx_vals, lambdas);
    breakdown.total = tape.scalar(total).as_f64();
    breakdown.position_costs = costs;
    if !breakdown.total.is_finite() || !breakdown.point_term.is_finite() || !breakdown.context_term.is_finite() {
        return Err(Error::Numeric(format!("loss is not finite ({step_hint})")));
    }
    let per_example = (0..n)
        .map(|b| {
            LossBreakdown::from_examples(&point_vals[b..=b], &ctx_vals[b..=b], &lambdas[b..=b])
        })
        .collect();
    Ok(Objective { total, breakdown, per_example, assignments })
}

/// Continuous objective on `x_t = √ᾱ_t x_0 + √(1−ᾱ_t) ε` for given `ts` and `noise`.
pub fn continuous_objective<F: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<F>,
    model: &ConPreDiff<F>,
    schedule: &ContinuousSchedule<F>,
    x0: &Array4<F>,
    ts: &[usize],
    noise: &Array4<F>,
    ctx_rng: &mut R,
) -> Result<Objective> {
    let n = x0.shape()[0];
    if model.cfg.denoiser.mode != DenoiserMode::Continuous {
        return Err(Error::Shape("continuous objective on a discrete model".into()));
    }
    if ts.len() != n || noise.shape() != x0.shape() {
        return Err(Error::Shape(format!(
            "x0 {:?}, noise {:?}, {} timesteps",
            x0.shape(),
            noise.shape(),
            ts.len()
        )));
    }
    if schedule.steps() != model.cfg.denoiser.timesteps {
        return Err(Error::Schedule(format!(
            "schedule has {} steps, denoiser expects {}",
            schedule.steps(),
            model.cfg.denoiser.timesteps
        )));
    }
    let mut xt = Array4::zeros(x0.raw_dim());
    for (b, &t) in ts.iter().enumerate() {
        let s = schedule.forward_sample(x0.index_axis(Axis(0), b), t, noise.index_axis(Axis(0), b))?;
        xt.index_axis_mut(Axis(0), b).assign(&s);
    }
    let vars = model.denoiser.forward(tape, &model.params, DenoiserInput::Continuous(&xt), ts)?;
    let target = tape.constant(x0.clone().into_dyn());
    let diff = tape.sub(vars.primary, target)?;
    let sq = tape.square(diff);
    let per_elem = x0.len() / n;
    let sq = tape.reshape(sq, &[n, per_elem])?;
    let point = tape.sum_axis(sq, 1);
    let mut point = tape.reshape(point, &[n])?;
    if model.cfg.point_weighting == PointWeighting::PosteriorMean {
        let weights: Vec<F> = ts
            .iter()
            .map(|&t| {
                let (c0, _) = schedule.posterior_coefficients(t);
                c0 * c0 / (F::of(2.0) * schedule.sigma2(t))
            })
            .collect();
        let wv = tape.constant(ArrayD::from_shape_vec(IxDyn(&[n]), weights).expect("len n"));
        point = tape.mul(point, wv)?;
    }
    let steps = schedule.steps();
    let lambdas: Vec<f64> = ts
        .iter()
        .map(|&t| lambda_schedule(t, steps, &model.cfg.context.lambda))
        .collect();
    let context = if model.head.is_some() {
        let values = x0.view().permuted_axes((0, 2, 3, 1)).as_standard_layout().into_owned();
        Some(context_term(tape, model, vars.tap, ts, &Targets { values }, ctx_rng)?)
    } else {
        None
    };
    assemble(tape, point, context, &lambdas, &format!("t = {ts:?}"))
}

/// Exact KL between the true posterior and the model posterior at one position.
pub fn discrete_kl<F: Scalar>(
    transitions: &DiscreteTransition<F>,
    xt: usize,
    x0: usize,
    t: usize,
    model_probs: &[F],
) -> Result<f64> {
    let k = transitions.codebook_size();
    if model_probs.len() != k {
        return Err(Error::Shape(format!("{} model probabilities for K = {k}", model_probs.len())));
    }
    let truth = transitions.posterior(xt, x0, t)?;
    let m = transitions.posterior_matrix(xt, t);
    let states = transitions.num_states();
    let mut mix = vec![0.0; states];
    for (s, slot) in mix.iter_mut().enumerate() {
        *slot = (0..k).map(|j| m[s * k + j].as_f64() * model_probs[j].as_f64()).sum();
    }
    let z: f64 = mix.iter().sum();
    let mut kl = 0.0;
    for (qv, mv) in truth.iter().zip(&mix) {
        let qv = qv.as_f64();
        if qv > 0.0 {
            kl += qv * (qv.ln() - (mv / z).max(f64::MIN_POSITIVE).ln());
        }
    }
    Ok(kl)
}

/// Discrete objective for token maps `x0` corrupted to `xt` at `ts`.
pub fn discrete_objective<F: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<F>,
    model: &ConPreDiff<F>,
    transitions: &DiscreteTransition<F>,
    x0: &[TokenMap],
    xt: &[TokenMap],
    ts: &[usize],
    ctx_rng: &mut R,
) -> Result<Objective> {
    let n = x0.len();
    if model.cfg.denoiser.mode != DenoiserMode::Discrete {
        return Err(Error::Shape("discrete objective on a continuous model".into()));
    }
    if xt.len() != n || ts.len() != n || n == 0 {
        return Err(Error::Shape(format!("{n} x0 maps, {} xt maps, {} timesteps", xt.len(), ts.len())));
    }
    let k = transitions.codebook_size();
    if k != model.cfg.denoiser.codebook_size || transitions.steps() != model.cfg.denoiser.timesteps {
        return Err(Error::Schedule("transition tables do not match the denoiser".into()));
    }
    let (h, w) = (x0[0].height, x0[0].width);
    for (a, b) in x0.iter().zip(xt) {
        if a.height != h || a.width != w || b.height != h || b.width != w {
            return Err(Error::Shape("token maps differ in size".into()));
        }
        a.validate(k, false)?;
        b.validate(k, true)?;
    }
    let hw = h * w;
    let p = n * hw;
    let states = k + 1;
    let vars = model.denoiser.forward(tape, &model.params, DenoiserInput::Discrete(xt), ts)?;

    let mut mats: HashMap<(usize, usize), Vec<F>> = HashMap::new();
    let mut m = ArrayD::<F>::zeros(IxDyn(&[p, states, k]));
    let mut truth = Array2::<F>::zeros((p, states));
    let mut neg_entropy = ArrayD::<F>::zeros(IxDyn(&[p, 1]));
    for b in 0..n {
        let t = ts[b];
        for i in 0..hw {
            let pos = b * hw + i;
            let (xt_tok, x0_tok) = (xt[b].tokens[i], x0[b].tokens[i]);
            let mat = mats
                .entry((t, xt_tok))
                .or_insert_with(|| transitions.posterior_matrix(xt_tok, t));
            m.slice_mut(ndarray::s![pos, .., ..])
                .as_slice_mut()
                .expect("contiguous block")
                .copy_from_slice(mat);
            let post = transitions.posterior(xt_tok, x0_tok, t)?;
            let mut ne = F::zero();
            for (s, &v) in post.iter().enumerate() {
                truth[[pos, s]] = v;
                if v > F::zero() {
                    ne += v * v.ln();
                }
            }
            neg_entropy[[pos, 0]] = ne;
        }
    }
    let probs = tape.permute(vars.primary, &[0, 2, 3, 1])?;
    let probs = tape.reshape(probs, &[p, 1, k])?;
    let mconst = tape.constant(m);
    let weighted = tape.mul(probs, mconst)?;
    let mix = tape.sum_axis(weighted, 2);
    let mix = tape.reshape(mix, &[p, states])?;
    let z = tape.sum_axis(mix, 1);
    let post = tape.div(mix, z)?;
    let post = tape.clamp(post, F::min_positive_value(), F::infinity());
    let logp = tape.ln(post);
    let tconst = tape.constant(truth.into_dyn());
    let cross = tape.mul(tconst, logp)?;
    let cross = tape.sum_axis(cross, 1);
    let ne = tape.constant(neg_entropy);
    let kl = tape.sub(ne, cross)?;
    let kl = tape.reshape(kl, &[n, hw])?;
    let point = tape.sum_axis(kl, 1);
    let point = tape.reshape(point, &[n])?;

    let steps = transitions.steps();
    let lambdas: Vec<f64> = ts
        .iter()
        .map(|&t| lambda_schedule(t, steps, &model.cfg.context.lambda))
        .collect();
    let context = if model.head.is_some() {
        let emb = model.denoiser.token_embedding().expect("discrete mode has an embedding");
        let table = model.params.get(emb.table);
        let e = emb.dim;
        let mut values = Array4::<F>::zeros((n, h, w, e));
        for (b, map) in x0.iter().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    values
                        .slice_mut(ndarray::s![b, y, x, ..])
                        .assign(&table.index_axis(Axis(0), map.get(y, x)));
                }
            }
        }
        Some(context_term(tape, model, vars.tap, ts, &Targets { values }, ctx_rng)?)
    } else {
        None
    };
    assemble(tape, point, context, &lambdas, &format!("t = {ts:?}"))
}

/// Single-example continuous loss; draws the noise from `rng` and then uses
/// it for context sampling as well.
pub fn conprediff_continuous_loss<F: Scalar, R: Rng + ?Sized>(
    model: &ConPreDiff<F>,
    schedule: &ContinuousSchedule<F>,
    x0: &Array3<F>,
    t: usize,
    rng: &mut R,
) -> Result<LossBreakdown> {
    let x0 = x0.clone().insert_axis(Axis(0));
    let noise = Array4::from_shape_fn(x0.raw_dim(), |_| F::standard_normal(rng));
    let mut tape = Tape::new();
    Ok(continuous_objective(&mut tape, model, schedule, &x0, &[t], &noise, rng)?.breakdown)
}

/// Single-example discrete loss; `x_t` is drawn from `q(x_t | x_0)` with `rng`.
pub fn conprediff_discrete_loss<F: Scalar, R: Rng + ?Sized>(
    model: &ConPreDiff<F>,
    transitions: &DiscreteTransition<F>,
    x0: &TokenMap,
    t: usize,
    rng: &mut R,
) -> Result<LossBreakdown> {
    let xt = transitions.forward_sample(x0, t, rng)?;
    let mut tape = Tape::new();
    Ok(discrete_objective(
        &mut tape,
        model,
        transitions,
        std::slice::from_ref(x0),
        std::slice::from_ref(&xt),
        &[t],
        rng,
    )?
    .breakdown)
}

/// Result of the Cauchy bound check.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

/// Builds `Ψ(i, ·)` per position: slot 0 is the point prediction at `i` and
/// slot `1 + k` is what neighbor `clamp(i + o_k)` predicts for its offset
/// `−o_k`. Inputs are `[h, w, d]` and `[h, w, K_n, d]`.
pub fn assemble_psi<F: Scalar>(
    point: ArrayView3<'_, F>,
    neighbor_preds: ArrayView4<'_, F>,
    index: &NeighborIndex,
) -> Result<Array4<F>> {
    let (h, w, d) = point.dim();
    let k_n = index.count();
    if neighbor_preds.dim() != (h, w, k_n, d) {
        return Err(Error::Shape(format!(
            "neighbor predictions {:?}, expected {:?}",
            neighbor_preds.shape(),
            [h, w, k_n, d]
        )));
    }
    let mut psi = Array4::zeros((h, w, k_n + 1, d));
    for y in 0..h {
        for x in 0..w {
            psi.slice_mut(ndarray::s![y, x, 0, ..]).assign(&point.slice(ndarray::s![y, x, ..]));
            for (k, &(dy, dx)) in index.offsets().iter().enumerate() {
                let (ny, nx) = index.resolve(h, w, y, x, k);
                let back = index.offset_position(-dy, -dx).expect("offsets are symmetric");
                psi.slice_mut(ndarray::s![y, x, k + 1, ..])
                    .assign(&neighbor_preds.slice(ndarray::s![ny, nx, back, ..]));
            }
        }
    }
    Ok(psi)
}

/// `lhs = Σ_i ‖x_0^i − mean_j Ψ(i,j)‖²` and
/// `rhs = 1/(K_n+1) Σ_i Σ_j ‖Ψ(i,j) − x_0^i‖²`.
pub fn verify_upper_bound<F: Scalar>(
    x0: ArrayView3<'_, F>,
    psi: ArrayView4<'_, F>,
) -> Result<BoundCheck> {
    let (h, w, d) = x0.dim();
    let (ph, pw, m, pd) = psi.dim();
    if (ph, pw, pd) != (h, w, d) || m == 0 {
        return Err(Error::Shape(format!(
            "x0 {:?} vs predictions {:?}",
            x0.shape(),
            psi.shape()
        )));
    }
    let mut lhs = 0.0;
    let mut rhs = 0.0;
    for y in 0..h {
        for x in 0..w {
            let block = psi.slice(ndarray::s![y, x, .., ..]);
            let pooled = neighbor_mean_pool(block)?;
            let truth = x0.slice(ndarray::s![y, x, ..]);
            lhs += pooled
                .iter()
                .zip(truth.iter())
                .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
                .sum::<f64>();
            let mut s = 0.0;
            for row in block.outer_iter() {
                s += row
                    .iter()
                    .zip(truth.iter())
                    .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
                    .sum::<f64>();
            }
            rhs += s / m as f64;
        }
    }
    Ok(BoundCheck { lhs, rhs, holds: lhs <= rhs + 1e-9 })
}

/// Forward process a model is trained against.
#[derive(Clone, Debug, PartialEq)]
pub enum Process<F> {
    Continuous(ContinuousSchedule<F>),
    Discrete(DiscreteTransition<F>),
}

impl<F: Scalar> Process<F> {
    pub fn steps(&self) -> usize {
        match self {
            Process::Continuous(s) => s.steps(),
            Process::Discrete(d) => d.steps(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Batch<F> {
    /// `[N, C, H, W]` in `[−1, 1]`.
    Continuous(Array4<F>),
    Discrete(Vec<TokenMap>),
}

impl<F> Batch<F> {
    pub fn len(&self) -> usize {
        match self {
            Batch::Continuous(x) => x.shape()[0],
            Batch::Discrete(m) => m.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainCfg {
    pub adam: AdamCfg,
    /// Losses above this abort the step.
    pub divergence_threshold: f64,
}

impl Default for TrainCfg {
    fn default() -> Self {
        Self { adam: AdamCfg::default(), divergence_threshold: 1e6 }
    }
}

/// Everything needed to continue training deterministically.
#[derive(Clone, Debug)]
pub struct TrainState<F> {
    pub model: ConPreDiff<F>,
    pub optimizer: Adam<F>,
    pub step: u64,
    pub seed: u64,
    /// Timesteps, Gaussian noise and discrete corruption.
    pub rng_diffusion: ChaCha8Rng,
    /// Neighbor slots and latent draws of the context head.
    pub rng_context: ChaCha8Rng,
    pub cfg: TrainCfg,
}

/// Draws per-example timesteps and the corrupted input for `batch`.
fn corrupt<F: Scalar, R: Rng + ?Sized>(
    batch: &Batch<F>,
    process: &Process<F>,
    rng: &mut R,
) -> Result<(Vec<usize>, Corrupted<F>)> {
    let steps = process.steps();
    let ts: Vec<usize> = (0..batch.len()).map(|_| rng.random_range(1..=steps)).collect();
    match (batch, process) {
        (Batch::Continuous(x0), Process::Continuous(_)) => {
            let noise = Array4::from_shape_fn(x0.raw_dim(), |_| F::standard_normal(rng));
            Ok((ts, Corrupted::Noise(noise)))
        }
        (Batch::Discrete(maps), Process::Discrete(tr)) => {
            let xt = maps
                .iter()
                .zip(&ts)
                .map(|(m, &t)| tr.forward_sample(m, t, rng))
                .collect::<Result<Vec<_>>>()?;
            Ok((ts, Corrupted::Tokens(xt)))
        }
        _ => Err(Error::Shape("batch kind does not match the forward process".into())),
    }
}

enum Corrupted<F> {
    Noise(Array4<F>),
    Tokens(Vec<TokenMap>),
}

fn objective<F: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<F>,
    model: &ConPreDiff<F>,
    batch: &Batch<F>,
    process: &Process<F>,
    ts: &[usize],
    corrupted: &Corrupted<F>,
    ctx_rng: &mut R,
) -> Result<Objective> {
    match (batch, process, corrupted) {
        (Batch::Continuous(x0), Process::Continuous(s), Corrupted::Noise(noise)) => {
            continuous_objective(tape, model, s, x0, ts, noise, ctx_rng)
        }
        (Batch::Discrete(x0), Process::Discrete(tr), Corrupted::Tokens(xt)) => {
            discrete_objective(tape, model, tr, x0, xt, ts, ctx_rng)
        }
        _ => Err(Error::Shape("batch kind does not match the forward process".into())),
    }
}

impl<F: Scalar> TrainState<F> {
    pub fn new(model: ConPreDiff<F>, cfg: TrainCfg, seed: u64) -> Self {
        let optimizer = Adam::new(&model.params, cfg.adam);
        Self {
            model,
            optimizer,
            step: 0,
            seed,
            rng_diffusion: rng_stream(seed, STREAM_DIFFUSION),
            rng_context: rng_stream(seed, STREAM_CONTEXT),
            cfg,
        }
    }

    /// One Adam step. On error (including divergence) the state is unchanged.
    pub fn train_step(&mut self, batch: &Batch<F>, process: &Process<F>) -> Result<LossBreakdown> {
        if batch.is_empty() {
            return Err(Error::Shape("empty batch".into()));
        }
        let mut rd = self.rng_diffusion.clone();
        let mut rc = self.rng_context.clone();
        let (ts, corrupted) = corrupt(batch, process, &mut rd)?;
        let mut tape = Tape::new();
        let obj = objective(&mut tape, &self.model, batch, process, &ts, &corrupted, &mut rc)
            .map_err(|e| match e {
                Error::Numeric(_) => Error::Divergence { step: self.step + 1, loss: f64::NAN },
                other => other,
            })?;
        let loss = obj.breakdown.total;
        if !loss.is_finite() || loss > self.cfg.divergence_threshold {
            return Err(Error::Divergence { step: self.step + 1, loss });
        }
        let grads = tape.backward(obj.total);
        self.optimizer.step(&mut self.model.params, &grads);
        self.rng_diffusion = rd;
        self.rng_context = rc;
        self.step += 1;
        Ok(obj.breakdown)
    }

    /// Loss of the current parameters on `batch` with corruption and context
    /// draws taken from `seed`, leaving the training streams untouched.
    pub fn evaluate(&self, batch: &Batch<F>, process: &Process<F>, seed: u64) -> Result<LossBreakdown> {
        evaluate(&self.model, batch, process, seed)
    }
}

/// Seeded, side-effect-free loss evaluation.
pub fn evaluate<F: Scalar>(
    model: &ConPreDiff<F>,
    batch: &Batch<F>,
    process: &Process<F>,
    seed: u64,
) -> Result<LossBreakdown> {
    let mut rd = rng_stream(seed, STREAM_DIFFUSION);
    let mut rc = rng_stream(seed, STREAM_CONTEXT);
    let (ts, corrupted) = corrupt(batch, process, &mut rd)?;
    let mut tape = Tape::new();
    Ok(objective(&mut tape, model, batch, process, &ts, &corrupted, &mut rc)?.breakdown)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::TapLayer;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
    }

    fn tiny_cfg(mode: DenoiserMode, stride: usize) -> ModelCfg {
        ModelCfg {
            denoiser: DenoiserCfg {
                mode,
                in_channels: 1,
                base_channels: 4,
                channel_mults: vec![1],
                time_emb_dim: 4,
                codebook_size: 3,
                token_emb_dim: 2,
                groups: 2,
                tap: TapLayer::LastUpBlock,
                timesteps: 4,
            },
            context: ContextCfg {
                stride,
                q: 3,
                hidden: vec![6, 6],
                latent_hidden: Some(vec![4]),
                ..ContextCfg::default()
            },
            point_weighting: PointWeighting::Simple,
        }
    }

    #[test]
    fn lambda_schedule_examples() {
        let c = LambdaSchedule::Constant { value: 0.5 };
        assert!((1..=10).all(|t| lambda_schedule(t, 10, &c) == 0.5));
        let l = LambdaSchedule::Linear { start: 1.0, end: 0.0 };
        assert!((lambda_schedule(6, 11, &l) - 0.5).abs() < 1e-12);
        assert_eq!(lambda_schedule(1, 11, &l), 1.0);
        assert_eq!(lambda_schedule(11, 11, &l), 0.0);
        let wild = LambdaSchedule::Linear { start: -3.0, end: 7.0 };
        assert!((1..=50).all(|t| (0.0..=1.0).contains(&lambda_schedule(t, 50, &wild))));
    }

    #[test]
    fn breakdown_total_is_consistent() {
        let b = LossBreakdown::from_examples(&[1.0, 3.0], &[2.0, 4.0], &[0.25, 0.75]);
        assert!(close(b.total, b.point_term + b.lambda_t * b.context_term, 1e-12));
        let z = LossBreakdown::from_examples(&[1.0], &[0.0], &[0.3]);
        assert_eq!(z.lambda_t, 0.3);
    }

    #[test]
    fn bound_equality_and_zero_cases() {
        let idx = NeighborIndex::new(1).unwrap();
        let x0 = Array3::from_shape_fn((3, 3, 2), |(y, x, c)| (y * 3 + x) as f64 + c as f64 * 0.5);
        let same = Array4::from_shape_fn((3, 3, idx.count() + 1, 2), |(y, x, _, c)| {
            x0[[y, x, c]] + 0.25
        });
        let r = verify_upper_bound(x0.view(), same.view()).unwrap();
        assert!((r.lhs - r.rhs).abs() < 1e-9 && r.holds);
        let exact = Array4::from_shape_fn((3, 3, idx.count() + 1, 2), |(y, x, _, c)| x0[[y, x, c]]);
        let r = verify_upper_bound(x0.view(), exact.view()).unwrap();
        assert_eq!((r.lhs, r.rhs), (0.0, 0.0));
    }

    #[test]
    fn assemble_psi_reads_back_neighbor_predictions() {
        let idx = NeighborIndex::new(1).unwrap();
        let point = Array3::<f64>::zeros((3, 3, 1));
        // neighbor (y, x) predicts value 100·y + 10·x + slot for each slot
        let preds = Array4::from_shape_fn((3, 3, idx.count(), 1), |(y, x, k, _)| {
            (100 * y + 10 * x + k) as f64
        });
        let psi = assemble_psi(point.view(), preds.view(), &idx).unwrap();
        // center (1,1): slot for offset (-1,-1) comes from (0,0) at offset (1,1)
        let k = idx.offset_position(-1, -1).unwrap();
        let back = idx.offset_position(1, 1).unwrap();
        assert_eq!(psi[[1, 1, k + 1, 0]], back as f64);
    }

    #[test]
    fn lambda_zero_total_equals_point_term() {
        let mut cfg = tiny_cfg(DenoiserMode::Continuous, 1);
        cfg.context.lambda = LambdaSchedule::Constant { value: 0.0 };
        let model = ConPreDiff::<f64>::new(cfg, 0).unwrap();
        let sched = ContinuousSchedule::linear(4, 1e-3, 0.2).unwrap();
        let mut rng = rng_stream(1, 0);
        let x0 = Array3::from_shape_fn((1, 4, 4), |(_, y, x)| if x < 2 { -0.5 } else { 0.5 + 0.1 * y as f64 });
        let l = conprediff_continuous_loss(&model, &sched, &x0, 3, &mut rng).unwrap();
        assert_eq!(l.total, l.point_term);
        assert!(l.context_term > 0.0);
    }

    #[test]
    fn disabled_head_builds_no_context_params() {
        let model = ConPreDiff::<f32>::new(tiny_cfg(DenoiserMode::Continuous, 0), 0).unwrap();
        assert!(model.head.is_none());
        assert_eq!(model.head_param_count(), 0);
        let with = ConPreDiff::<f32>::new(tiny_cfg(DenoiserMode::Continuous, 2), 0).unwrap();
        // denoiser initialization does not depend on the head
        for (id, name, v) in model.params.iter() {
            assert_eq!(with.params.name(id), name);
            assert_eq!(with.params.get(id), v);
        }
    }

    #[test]
    fn discrete_kl_vanishes_for_the_truth_and_is_nonnegative() {
        let tr = DiscreteTransition::<f64>::mask_and_replace(3, 4, 0.9, 0.1).unwrap();
        let mut rng = rng_stream(2, 0);
        for _ in 0..1000 {
            let t = rng.random_range(1..=4);
            let x0 = rng.random_range(0..3);
            let xt = tr.forward_sample(&TokenMap::filled(1, 1, x0), t, &mut rng).unwrap().tokens[0];
            let mut onehot = vec![0.0; 3];
            onehot[x0] = 1.0;
            assert!(discrete_kl(&tr, xt, x0, t, &onehot).unwrap().abs() < 1e-12);
            let raw: Vec<f64> = (0..3).map(|_| rng.random::<f64>() + 1e-3).collect();
            let s: f64 = raw.iter().sum();
            let p: Vec<f64> = raw.iter().map(|v| v / s).collect();
            assert!(discrete_kl(&tr, xt, x0, t, &p).unwrap() >= -1e-12);
        }
    }

    #[test]
    fn tape_kl_matches_scalar_kl() {
        let model = ConPreDiff::<f64>::new(tiny_cfg(DenoiserMode::Discrete, 0), 3).unwrap();
        let tr = DiscreteTransition::<f64>::mask_and_replace(3, 4, 0.9, 0.1).unwrap();
        let mut rng = rng_stream(3, 0);
        let x0 = TokenMap::new(2, 2, vec![0, 1, 2, 1]).unwrap();
        for t in 1..=4 {
            let xt = tr.forward_sample(&x0, t, &mut rng).unwrap();
            let mut tape = Tape::new();
            let obj = discrete_objective(&mut tape, &model, &tr, &[x0.clone()], &[xt.clone()], &[t], &mut rng).unwrap();
            let pred = crate::denoiser::denoise_point(
                &model.denoiser,
                &model.params,
                DenoiserInput::Discrete(std::slice::from_ref(&xt)),
                &[t],
            )
            .unwrap();
            let mut expect = 0.0;
            for y in 0..2 {
                for x in 0..2 {
                    let p: Vec<f64> = (0..3).map(|k| pred.primary[[0, k, y, x]]).collect();
                    expect += discrete_kl(&tr, xt.get(y, x), x0.get(y, x), t, &p).unwrap();
                }
            }
            assert!(close(obj.breakdown.point_term, expect, 1e-10));
        }
    }

    #[test]
    fn zero_lr_keeps_parameters_and_steps_count() {
        let model = ConPreDiff::<f64>::new(tiny_cfg(DenoiserMode::Continuous, 1), 0).unwrap();
        let cfg = TrainCfg { adam: AdamCfg { lr: 0.0, ..AdamCfg::default() }, ..TrainCfg::default() };
        let mut state = TrainState::new(model, cfg, 5);
        let before = state.model.params.clone();
        let proc = Process::Continuous(ContinuousSchedule::linear(4, 1e-3, 0.2).unwrap());
        let batch = Batch::Continuous(Array4::from_elem((2, 1, 4, 4), 0.3));
        state.train_step(&batch, &proc).unwrap();
        state.train_step(&batch, &proc).unwrap();
        assert_eq!(state.step, 2);
        assert_eq!(state.model.params, before);
    }

    #[test]
    fn divergence_leaves_state_untouched() {
        let model = ConPreDiff::<f64>::new(tiny_cfg(DenoiserMode::Continuous, 1), 0).unwrap();
        let cfg = TrainCfg { divergence_threshold: 1e-12, ..TrainCfg::default() };
        let mut state = TrainState::new(model, cfg, 5);
        let params = state.model.params.clone();
        let rng = state.rng_diffusion.clone();
        let proc = Process::Continuous(ContinuousSchedule::linear(4, 1e-3, 0.2).unwrap());
        let batch = Batch::Continuous(Array4::from_elem((1, 1, 4, 4), 0.9));
        assert!(matches!(state.train_step(&batch, &proc), Err(Error::Divergence { step: 1, .. })));
        assert_eq!(state.step, 0);
        assert_eq!(state.model.params, params);
        assert_eq!(state.rng_diffusion, rng);
    }
}
