//! Ancestral sampling and resampling inpainting. Every entry point holds an
//! [`InferenceGuard`] so that a context head invoked by mistake fails loudly.

use std::collections::HashMap;

use ndarray::{Array2, Array3, Array4, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::context_decoder::InferenceGuard;
use crate::corruption::{sample_categorical, ContinuousSchedule, DiscreteTransition, ReverseVariance, TokenMap};
use crate::denoiser::{denoise_point, DenoiserInput};
use crate::diffusion_core::ConPreDiff;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Anything that predicts `x̂_0` from a noisy batch.
pub trait X0Model<F> {
    fn predict_x0(&self, xt: &Array4<F>, ts: &[usize]) -> Result<Array4<F>>;
}

/// Anything that predicts `p(x̃_0 | x_t)` as `[N, K, H, W]`.
pub trait TokenModel<F> {
    fn codebook_size(&self) -> usize;
    fn predict_tokens(&self, xt: &[TokenMap], ts: &[usize]) -> Result<Array4<F>>;
}

impl<F: Scalar> X0Model<F> for ConPreDiff<F> {
    fn predict_x0(&self, xt: &Array4<F>, ts: &[usize]) -> Result<Array4<F>> {
        Ok(denoise_point(&self.denoiser, &self.params, DenoiserInput::Continuous(xt), ts)?.primary)
    }
}

impl<F: Scalar> TokenModel<F> for ConPreDiff<F> {
    fn codebook_size(&self) -> usize {
        self.cfg.denoiser.codebook_size
    }

    fn predict_tokens(&self, xt: &[TokenMap], ts: &[usize]) -> Result<Array4<F>> {
        Ok(denoise_point(&self.denoiser, &self.params, DenoiserInput::Discrete(xt), ts)?.primary)
    }
}

/// A reverse-process schedule and the model timestep of each of its steps.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingSchedule<F> {
    pub schedule: ContinuousSchedule<F>,
    /// `model_t[k - 1]` is the training timestep fed to the model at step `k`.
    pub model_t: Vec<usize>,
}

impl<F: Scalar> SamplingSchedule<F> {
    pub fn full(schedule: &ContinuousSchedule<F>) -> Self {
        Self {
            model_t: (1..=schedule.steps()).collect(),
            schedule: schedule.clone(),
        }
    }

    /// `steps` evenly spaced steps of `schedule`; the full schedule when equal.
    pub fn respaced(schedule: &ContinuousSchedule<F>, steps: usize, variance: ReverseVariance) -> Result<Self> {
        if steps == schedule.steps() {
            return Ok(Self::full(schedule));
        }
        let (schedule, model_t) = schedule.respaced(steps, variance)?;
        Ok(Self { schedule, model_t })
    }

    pub fn steps(&self) -> usize {
        self.model_t.len()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleOptions {
    /// Clip `x̂_0` to `[−1, 1]` at every step, not only the final output.
    #[serde(default)]
    pub clip_each_step: bool,
}

fn clip<F: Scalar>(x: &mut Array4<F>) {
    x.mapv_inplace(|v| v.max(-F::one()).min(F::one()));
}

fn gaussian<F: Scalar, R: Rng + ?Sized>(shape: ndarray::Ix4, rng: &mut R) -> Array4<F> {
    Array4::from_shape_fn(shape, |_| F::standard_normal(rng))
}

/// One reverse step from `x_k` to `x_{k-1}` of the (possibly respaced) schedule.
fn reverse_step<F: Scalar, M: X0Model<F> + ?Sized, R: Rng + ?Sized>(
    model: &M,
    sched: &SamplingSchedule<F>,
    x: &Array4<F>,
    k: usize,
    opts: &SampleOptions,
    rng: &mut R,
) -> Result<Array4<F>> {
    let n = x.shape()[0];
    let ts = vec![sched.model_t[k - 1]; n];
    let mut x0 = model.predict_x0(x, &ts)?;
    if opts.clip_each_step {
        clip(&mut x0);
    }
    let mut mean = sched.schedule.posterior_mean(x0.view(), x.view(), k)?;
    if k > 1 {
        let s = sched.schedule.sigma2(k).sqrt();
        let z: Array4<F> = gaussian(x.raw_dim(), rng);
        Zip::from(&mut mean).and(&z).for_each(|m, &z| *m += s * z);
    }
    if mean.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("sampler state at t = {}", sched.model_t[k - 1])));
    }
    Ok(mean)
}

/// Draws `x_T ~ N(0, I)` and runs the reverse chain down to `x_0`.
pub fn ancestral_sample_continuous<F: Scalar, M: X0Model<F> + ?Sized, R: Rng + ?Sized>(
    model: &M,
    shape: (usize, usize, usize, usize),
    rng: &mut R,
    sched: &SamplingSchedule<F>,
    opts: &SampleOptions,
) -> Result<Array4<F>> {
    let _guard = InferenceGuard::enter();
    if shape.0 == 0 {
        return Err(Error::Shape("zero samples requested".into()));
    }
    let mut x: Array4<F> = gaussian(ndarray::Dim([shape.0, shape.1, shape.2, shape.3]), rng);
    for k in (1..=sched.steps()).rev() {
        x = reverse_step(model, sched, &x, k, opts, rng)?;
    }
    clip(&mut x);
    Ok(x)
}

/// Starts from the all-mask map and samples each position from the model
/// posterior mixture at every step.
pub fn ancestral_sample_discrete<F: Scalar, M: TokenModel<F> + ?Sized, R: Rng + ?Sized>(
    model: &M,
    count: usize,
    height: usize,
    width: usize,
    rng: &mut R,
    transitions: &DiscreteTransition<F>,
) -> Result<Vec<TokenMap>> {
    let _guard = InferenceGuard::enter();
    let k = transitions.codebook_size();
    if model.codebook_size() != k {
        return Err(Error::Shape(format!(
            "model codebook {} vs transitions {k}",
            model.codebook_size()
        )));
    }
    let mask = transitions.mask_index();
    let states = transitions.num_states();
    let mut maps = vec![TokenMap::filled(height, width, mask); count];
    for t in (1..=transitions.steps()).rev() {
        let probs = model.predict_tokens(&maps, &vec![t; count])?;
        let mut mats: HashMap<usize, Vec<F>> = HashMap::new();
        for (b, map) in maps.iter_mut().enumerate() {
            for y in 0..height {
                for x in 0..width {
                    let i = y * width + x;
                    let xt = map.tokens[i];
                    let m = mats.entry(xt).or_insert_with(|| transitions.posterior_matrix(xt, t));
                    let mix: Vec<F> = (0..states)
                        .map(|s| (0..k).map(|j| m[s * k + j] * probs[[b, j, y, x]]).sum())
                        .collect();
                    if !(mix.iter().copied().sum::<F>() > F::zero()) {
                        return Err(Error::SamplerInvariant(format!(
                            "no reachable mass at t = {t}, position ({y}, {x})"
                        )));
                    }
                    map.tokens[i] = sample_categorical(&mix, rng);
                }
            }
        }
    }
    for map in &maps {
        if map.mask_count(k) > 0 {
            return Err(Error::SamplerInvariant("mask token survived to t = 0".into()));
        }
    }
    Ok(maps)
}

/// Known pixels, resampling count `r` and jump length `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct InpaintTask<F> {
    /// `[C, H, W]` in `[−1, 1]`.
    pub image: Array3<F>,
    /// `[H, W]`, `true` where the pixel is known.
    pub mask: Array2<bool>,
    pub steps: usize,
    pub resample: usize,
    pub jump: usize,
}

impl<F: Scalar> InpaintTask<F> {
    pub fn new(image: Array3<F>, mask: Array2<bool>) -> Self {
        Self { image, mask, steps: 250, resample: 10, jump: 10 }
    }

    pub fn validate(&self) -> Result<()> {
        let (_, h, w) = self.image.dim();
        if self.mask.dim() != (h, w) {
            return Err(Error::Shape(format!(
                "mask {:?} for image {:?}",
                self.mask.shape(),
                self.image.shape()
            )));
        }
        if self.resample == 0 {
            return Err(Error::param("r", "must be >= 1"));
        }
        if self.jump == 0 {
            return Err(Error::param("j", "must be >= 1"));
        }
        if self.steps == 0 {
            return Err(Error::param("steps", "must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InpaintOutput<F> {
    pub image: Array3<F>,
    /// Set when the mask was degenerate.
    pub warning: Option<String>,
}

/// Resampling inpainting: unknown pixels follow the reverse chain, known
/// pixels are replaced by forward-noised ground truth at every state, and
/// the chain periodically jumps back `j` states `r − 1` times.
pub fn inpaint<F: Scalar, M: X0Model<F> + ?Sized, R: Rng + ?Sized>(
    model: &M,
    task: &InpaintTask<F>,
    rng: &mut R,
    schedule: &ContinuousSchedule<F>,
    opts: &SampleOptions,
) -> Result<InpaintOutput<F>> {
    let _guard = InferenceGuard::enter();
    task.validate()?;
    let known_count = task.mask.iter().filter(|&&m| m).count();
    if known_count == task.mask.len() {
        return Ok(InpaintOutput {
            image: task.image.clone(),
            warning: Some("mask marks every pixel known; returning the input".into()),
        });
    }
    let sched = SamplingSchedule::respaced(schedule, task.steps, ReverseVariance::Beta)?;
    let (c, h, w) = task.image.dim();
    if known_count == 0 {
        let x = ancestral_sample_continuous(model, (1, c, h, w), rng, &sched, opts)?;
        return Ok(InpaintOutput {
            image: x.index_axis_move(Axis(0), 0),
            warning: Some("mask marks no pixel known; returning an unconditional sample".into()),
        });
    }
    let image = task.image.view().insert_axis(Axis(0)).to_owned();
    let known = |y: usize, x: usize| task.mask[[y, x]];
    let states = jump_states(sched.steps(), task.jump, task.resample);
    let mut x: Array4<F> = gaussian(image.raw_dim(), rng);
    for pair in states.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        if b + 1 == a {
            let unknown = reverse_step(model, &sched, &x, a, opts, rng)?;
            let truth = if b >= 1 {
                let z: Array4<F> = gaussian(image.raw_dim(), rng);
                sched.schedule.forward_sample(image.view(), b, z.view())?
            } else {
                image.clone()
            };
            x = unknown;
            for ch in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        if known(y, xx) {
                            x[[0, ch, y, xx]] = truth[[0, ch, y, xx]];
                        }
                    }
                }
            }
        } else {
            let z: Array4<F> = gaussian(image.raw_dim(), rng);
            x = sched.schedule.forward_step(x.view(), b, z.view())?;
        }
    }
    clip(&mut x);
    Ok(InpaintOutput { image: x.index_axis_move(Axis(0), 0), warning: None })
}

/// Chain states visited by [`inpaint`], from `steps` down to 0. Consecutive
/// entries either decrease by one (a reverse step) or increase by one (a
/// forward re-noising step). With `resample = 1` there are no jumps.
pub fn jump_states(steps: usize, jump: usize, resample: usize) -> Vec<usize> {
    let mut jumps: HashMap<usize, usize> = HashMap::new();
    let mut j = 0;
    while j + jump < steps {
        jumps.insert(j, resample.saturating_sub(1));
        j += jump;
    }
    // `t` is the 0-based label of the current state; state = t + 1.
    let mut t = steps;
    let mut out = Vec::with_capacity(steps * resample + 1);
    while t >= 1 {
        t -= 1;
        out.push(t + 1);
        if let Some(r) = jumps.get_mut(&t) {
            if *r > 0 {
                *r -= 1;
                for _ in 0..jump {
                    t += 1;
                    out.push(t + 1);
                }
            }
        }
    }
    out.push(0);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{DenoiserCfg, DenoiserMode};
    use crate::diffusion_core::{ContextCfg, DecoderVariant, ModelCfg};
    use ndarray::Array1;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(mode: DenoiserMode, variant: DecoderVariant) -> ConPreDiff<f64> {
        let cfg = ModelCfg {
            denoiser: DenoiserCfg {
                mode,
                in_channels: 1,
                base_channels: 4,
                channel_mults: vec![1],
                time_emb_dim: 4,
                codebook_size: 3,
                token_emb_dim: 2,
                groups: 2,
                timesteps: 6,
                ..DenoiserCfg::default()
            },
            context: ContextCfg { stride: 1, q: 2, variant, hidden: vec![4], ..ContextCfg::default() },
            ..ModelCfg::default()
        };
        ConPreDiff::new(cfg, 11).unwrap()
    }

    fn schedule() -> ContinuousSchedule<f64> {
        ContinuousSchedule::linear(6, 1e-3, 0.2).unwrap()
    }

    /// Predicts a fixed token everywhere.
    struct Constant(usize, usize);

    impl TokenModel<f64> for Constant {
        fn codebook_size(&self) -> usize {
            self.1
        }
        fn predict_tokens(&self, xt: &[TokenMap], _: &[usize]) -> Result<Array4<f64>> {
            let (h, w) = (xt[0].height, xt[0].width);
            Ok(Array4::from_shape_fn((xt.len(), self.1, h, w), |(_, k, _, _)| {
                if k == self.0 { 1.0 } else { 0.0 }
            }))
        }
    }

    /// Returns a fixed per-channel value as x̂0.
    struct Flat(Array1<f64>);

    impl X0Model<f64> for Flat {
        fn predict_x0(&self, xt: &Array4<f64>, _: &[usize]) -> Result<Array4<f64>> {
            Ok(Array4::from_shape_fn(xt.raw_dim(), |(_, c, _, _)| self.0[c]))
        }
    }

    fn half_mask(h: usize, w: usize) -> Array2<bool> {
        Array2::from_shape_fn((h, w), |(_, x)| x < w / 2)
    }

    #[test]
    fn continuous_sampling_is_deterministic_and_clipped() {
        let m = model(DenoiserMode::Continuous, DecoderVariant::Distribution);
        let sched = SamplingSchedule::full(&schedule());
        let run = |seed| {
            ancestral_sample_continuous(&m, (2, 1, 4, 4), &mut ChaCha8Rng::seed_from_u64(seed), &sched, &SampleOptions::default())
                .unwrap()
        };
        let a = run(3);
        assert_eq!(a, run(3));
        assert_ne!(a, run(4));
        assert!(a.iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(m.head_calls(), 0);
    }

    #[test]
    fn discrete_sampling_never_leaves_masks() {
        let m = model(DenoiserMode::Discrete, DecoderVariant::Feature);
        let tr = DiscreteTransition::mask_and_replace(3, 6, 0.9, 0.1).unwrap();
        let run = |seed| ancestral_sample_discrete(&m, 3, 4, 4, &mut ChaCha8Rng::seed_from_u64(seed), &tr).unwrap();
        let maps = run(5);
        assert_eq!(maps, run(5));
        assert!(maps.iter().all(|mp| mp.tokens.iter().all(|&t| t < 3)));
        assert_eq!(m.head_calls(), 0);
    }

    #[test]
    fn one_hot_model_gives_constant_map() {
        let tr = DiscreteTransition::<f64>::mask_and_replace(4, 5, 0.9, 0.1).unwrap();
        let maps = ancestral_sample_discrete(&Constant(2, 4), 2, 3, 5, &mut ChaCha8Rng::seed_from_u64(0), &tr).unwrap();
        assert!(maps.iter().all(|mp| mp.tokens.iter().all(|&t| t == 2)));
        let wrong = ancestral_sample_discrete(&Constant(0, 3), 1, 2, 2, &mut ChaCha8Rng::seed_from_u64(0), &tr);
        assert!(matches!(wrong, Err(Error::Shape(_))));
    }

    #[test]
    fn inpainting_keeps_known_pixels_and_is_deterministic() {
        let m = model(DenoiserMode::Continuous, DecoderVariant::Feature);
        let image = Array3::from_shape_fn((1, 4, 4), |(_, y, x)| (y as f64 - x as f64) / 4.0);
        let mut task = InpaintTask::new(image.clone(), half_mask(4, 4));
        task.steps = 6;
        task.jump = 2;
        task.resample = 3;
        let run = |seed| inpaint(&m, &task, &mut ChaCha8Rng::seed_from_u64(seed), &schedule(), &SampleOptions::default()).unwrap();
        let out = run(9);
        assert!(out.warning.is_none());
        assert_eq!(out, run(9));
        for y in 0..4 {
            for x in 0..2 {
                assert!((out.image[[0, y, x]] - image[[0, y, x]]).abs() < 1e-2);
            }
        }
        assert_eq!(m.head_calls(), 0);
    }

    #[test]
    fn degenerate_masks() {
        let m = Flat(Array1::from(vec![0.3]));
        let image = Array3::from_elem((1, 3, 3), -0.4);
        let sched = schedule();
        let opts = SampleOptions::default();
        let all = InpaintTask::new(image.clone(), Array2::from_elem((3, 3), true));
        let out = inpaint(&m, &all, &mut ChaCha8Rng::seed_from_u64(1), &sched, &opts).unwrap();
        assert!(out.warning.is_some());
        assert!(out.image.iter().zip(&image).all(|(a, b)| (a - b).abs() < 1e-6));

        let mut none = InpaintTask::new(image, Array2::from_elem((3, 3), false));
        none.steps = 6;
        let out = inpaint(&m, &none, &mut ChaCha8Rng::seed_from_u64(1), &sched, &opts).unwrap();
        assert!(out.warning.is_some());
        let plain = ancestral_sample_continuous(&m, (1, 1, 3, 3), &mut ChaCha8Rng::seed_from_u64(1), &SamplingSchedule::full(&sched), &opts)
            .unwrap();
        assert_eq!(out.image, plain.index_axis_move(Axis(0), 0));
    }

    #[test]
    fn invalid_tasks_are_rejected() {
        let m = Flat(Array1::from(vec![0.0]));
        let mut task = InpaintTask::new(Array3::zeros((1, 2, 2)), Array2::from_elem((3, 2), true));
        let sched = schedule();
        let go = |t: &InpaintTask<f64>| inpaint(&m, t, &mut ChaCha8Rng::seed_from_u64(0), &sched, &SampleOptions::default());
        assert!(matches!(go(&task), Err(Error::Shape(_))));
        task.mask = Array2::from_elem((2, 2), true);
        task.resample = 0;
        assert!(matches!(go(&task), Err(Error::Parameter { name: "r", .. })));
        task.resample = 1;
        task.jump = 0;
        assert!(matches!(go(&task), Err(Error::Parameter { name: "j", .. })));
    }

    /// Plain masked replacement, written independently of the jump machinery.
    fn no_jump_inpaint(m: &dyn X0Model<f64>, image: &Array3<f64>, mask: &Array2<bool>, sched: &ContinuousSchedule<f64>, rng: &mut ChaCha8Rng) -> Array3<f64> {
        let img = image.view().insert_axis(Axis(0)).to_owned();
        let mut x = Array4::from_shape_fn(img.raw_dim(), |_| f64::standard_normal(rng));
        for t in (1..=sched.steps()).rev() {
            let x0 = m.predict_x0(&x, &[t]).unwrap();
            let mut next = sched.posterior_mean(x0.view(), x.view(), t).unwrap();
            if t > 1 {
                let s = sched.sigma2(t).sqrt();
                next.mapv_inplace(|v| v + s * f64::standard_normal(rng));
            }
            let known = if t > 1 {
                let z = Array4::from_shape_fn(img.raw_dim(), |_| f64::standard_normal(rng));
                sched.forward_sample(img.view(), t - 1, z.view()).unwrap()
            } else {
                img.clone()
            };
            Zip::indexed(&mut next).and(&known).for_each(|(_, _, y, xx), v, &k| {
                if mask[[y, xx]] {
                    *v = k;
                }
            });
            x = next;
        }
        x.mapv_inplace(|v| v.clamp(-1.0, 1.0));
        x.index_axis_move(Axis(0), 0)
    }

    #[test]
    fn single_resample_matches_no_jump_loop() {
        let m = model(DenoiserMode::Continuous, DecoderVariant::Distribution);
        let image = Array3::from_shape_fn((1, 4, 4), |(_, y, x)| ((y * 4 + x) as f64 / 8.0) - 1.0);
        let mask = half_mask(4, 4);
        let sched = schedule();
        let mut task = InpaintTask::new(image.clone(), mask.clone());
        task.steps = 6;
        task.jump = 1;
        task.resample = 1;
        let out = inpaint(&m, &task, &mut ChaCha8Rng::seed_from_u64(21), &sched, &SampleOptions::default()).unwrap();
        let reference = no_jump_inpaint(&m, &image, &mask, &sched, &mut ChaCha8Rng::seed_from_u64(21));
        assert_eq!(out.image, reference);
    }

    #[test]
    fn jump_states_without_resampling_descend() {
        assert_eq!(jump_states(5, 1, 1), vec![5, 4, 3, 2, 1, 0]);
        assert_eq!(jump_states(5, 3, 1), vec![5, 4, 3, 2, 1, 0]);
    }

    #[test]
    fn jump_states_walk_in_unit_steps() {
        let s = jump_states(250, 10, 10);
        assert_eq!(s.first(), Some(&250));
        assert_eq!(s.last(), Some(&0));
        assert!(s.windows(2).all(|p| p[0] + 1 == p[1] || p[1] + 1 == p[0]));
        assert!(s.iter().all(|&v| v <= 250));
        let reverse = s.windows(2).filter(|p| p[1] + 1 == p[0]).count();
        let forward = s.windows(2).filter(|p| p[0] + 1 == p[1]).count();
        assert_eq!(reverse - forward, 250);
        // 24 jump points (labels 0, 10, …, 230), each repeated r − 1 = 9 times
        assert_eq!(forward, 24 * 9 * 10);
    }
}
