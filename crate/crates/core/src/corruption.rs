//! Forward corruption processes.
//!
//! Timesteps are 1-based throughout the public API (`1..=T`), matching the
//! usual diffusion notation; arrays are stored 0-based internally. The mask
//! token of the discrete process lives at index `K` of a `K + 1` state space.

use ndarray::{Array, ArrayView, Dimension, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Which constant to use for the reverse-process variance `σ_t²`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReverseVariance {
    /// `σ_t² = β_t`.
    #[default]
    Beta,
    /// `σ_t² = β̃_t`, the variance of `q(x_{t-1} | x_t, x_0)`.
    Posterior,
}

/// Gaussian forward-process tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Scalar")]
pub struct ContinuousSchedule<F> {
    beta: Vec<F>,
    alpha: Vec<F>,
    alpha_bar: Vec<F>,
    sigma2: Vec<F>,
    coef_x0: Vec<F>,
    coef_xt: Vec<F>,
    posterior_variance: Vec<F>,
}

impl<F: Scalar> ContinuousSchedule<F> {
    /// Linearly spaced `β` (endpoints inclusive), `σ_t² = β_t`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        Self::linear_with(steps, beta_start, beta_end, ReverseVariance::Beta)
    }

    pub fn linear_with(
        steps: usize,
        beta_start: f64,
        beta_end: f64,
        variance: ReverseVariance,
    ) -> Result<Self> {
        if steps < 1 {
            return Err(Error::param("T", "must be at least 1"));
        }
        if !(beta_start > 0.0) {
            return Err(Error::param("beta_start", format!("{beta_start} must be > 0")));
        }
        if !(beta_end < 1.0) {
            return Err(Error::param("beta_end", format!("{beta_end} must be < 1")));
        }
        if beta_start > beta_end {
            return Err(Error::param(
                "beta_start",
                format!("{beta_start} exceeds beta_end {beta_end}"),
            ));
        }
        let betas = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect::<Vec<_>>();
        Self::from_betas(&betas, variance)
    }

    pub fn from_betas(betas: &[f64], variance: ReverseVariance) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::param("T", "must be at least 1"));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::param("beta", format!("{b} outside (0, 1)")));
        }
        let beta: Vec<F> = betas.iter().map(|&b| F::of(b)).collect();
        let alpha: Vec<F> = beta.iter().map(|&b| F::one() - b).collect();
        let alpha_bar: Vec<F> = alpha
            .iter()
            .scan(F::one(), |acc, &a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();

        let n = beta.len();
        let mut coef_x0 = Vec::with_capacity(n);
        let mut coef_xt = Vec::with_capacity(n);
        let mut posterior_variance = Vec::with_capacity(n);
        for i in 0..n {
            let ab_prev = if i == 0 { F::one() } else { alpha_bar[i - 1] };
            let denom = F::one() - alpha_bar[i];
            coef_x0.push(ab_prev.sqrt() * beta[i] / denom);
            coef_xt.push(alpha[i].sqrt() * (F::one() - ab_prev) / denom);
            posterior_variance.push((F::one() - ab_prev) / denom * beta[i]);
        }
        let sigma2 = match variance {
            ReverseVariance::Beta => beta.clone(),
            // β̃_1 is zero; fall back to β_1 so σ² stays positive (the final
            // step adds no noise anyway).
            ReverseVariance::Posterior => posterior_variance
                .iter()
                .zip(&beta)
                .map(|(&pv, &b)| if pv > F::zero() { pv } else { b })
                .collect(),
        };
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
            sigma2,
            coef_x0,
            coef_xt,
            posterior_variance,
        })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn idx(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(Error::param(
                "t",
                format!("{t} outside 1..={}", self.steps()),
            ));
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> F {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> F {
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> F {
        self.alpha_bar[t - 1]
    }

    /// `ᾱ_{t-1}` with `ᾱ_0 = 1`.
    pub fn alpha_bar_prev(&self, t: usize) -> F {
        if t <= 1 {
            F::one()
        } else {
            self.alpha_bar[t - 2]
        }
    }

    pub fn sigma2(&self, t: usize) -> F {
        self.sigma2[t - 1]
    }

    pub fn posterior_variance(&self, t: usize) -> F {
        self.posterior_variance[t - 1]
    }

    /// Coefficients `(c0, ct)` with `μ̂ = c0·x0 + ct·xt`.
    pub fn posterior_coefficients(&self, t: usize) -> (F, F) {
        if t <= 1 {
            (F::one(), F::zero())
        } else {
            (self.coef_x0[t - 1], self.coef_xt[t - 1])
        }
    }

    pub fn betas(&self) -> &[F] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[F] {
        &self.alpha_bar
    }

    /// `√ᾱ_t·x0 + √(1−ᾱ_t)·noise`.
    pub fn forward_sample<D: Dimension>(
        &self,
        x0: ArrayView<'_, F, D>,
        t: usize,
        noise: ArrayView<'_, F, D>,
    ) -> Result<Array<F, D>> {
        let i = self.idx(t)?;
        if x0.shape() != noise.shape() {
            return Err(Error::Shape(format!(
                "x0 {:?} vs noise {:?}",
                x0.shape(),
                noise.shape()
            )));
        }
        let a = self.alpha_bar[i].sqrt();
        let s = (F::one() - self.alpha_bar[i]).sqrt();
        Ok(Zip::from(&x0)
            .and(&noise)
            .map_collect(|&x, &e| a * x + s * e))
    }

    /// One step of the Markov kernel `q(x_t | x_{t-1})`.
    pub fn forward_step<D: Dimension>(
        &self,
        x_prev: ArrayView<'_, F, D>,
        t: usize,
        noise: ArrayView<'_, F, D>,
    ) -> Result<Array<F, D>> {
        let i = self.idx(t)?;
        if x_prev.shape() != noise.shape() {
            return Err(Error::Shape(format!(
                "x {:?} vs noise {:?}",
                x_prev.shape(),
                noise.shape()
            )));
        }
        let a = self.alpha[i].sqrt();
        let s = self.beta[i].sqrt();
        Ok(Zip::from(&x_prev)
            .and(&noise)
            .map_collect(|&x, &e| a * x + s * e))
    }

    /// Mean of `q(x_{t-1} | x_t, x_0)`; at `t = 1` this is `x0` itself.
    pub fn posterior_mean<D: Dimension>(
        &self,
        x0: ArrayView<'_, F, D>,
        xt: ArrayView<'_, F, D>,
        t: usize,
    ) -> Result<Array<F, D>> {
        self.idx(t)?;
        if x0.shape() != xt.shape() {
            return Err(Error::Shape(format!(
                "x0 {:?} vs xt {:?}",
                x0.shape(),
                xt.shape()
            )));
        }
        let (c0, ct) = self.posterior_coefficients(t);
        Ok(Zip::from(&x0).and(&xt).map_collect(|&a, &b| c0 * a + ct * b))
    }

    /// Evenly spaced sub-schedule of `n` steps, returned with the original
    /// timestep that each new step corresponds to.
    pub fn respaced(&self, n: usize, variance: ReverseVariance) -> Result<(Self, Vec<usize>)> {
        let total = self.steps();
        if n == 0 || n > total {
            return Err(Error::param("steps", format!("{n} outside 1..={total}")));
        }
        let timesteps: Vec<usize> = if n == 1 {
            vec![total]
        } else {
            (0..n)
                .map(|k| 1 + ((k * (total - 1)) as f64 / (n - 1) as f64).round() as usize)
                .collect()
        };
        let mut prev = 1.0;
        let betas: Vec<f64> = timesteps
            .iter()
            .map(|&t| {
                let ab = self.alpha_bar(t).as_f64();
                let b = 1.0 - ab / prev;
                prev = ab;
                b
            })
            .collect();
        Ok((Self::from_betas(&betas, variance)?, timesteps))
    }
}

/// Absorbing-state mask-and-replace transitions over `K` codebook tokens plus
/// the mask token at index `K`.
///
/// Matrices are stored row-stochastic (`from` indexes rows), so
/// `q(x_t = j | x_{t-1} = i) = Q_t[i][j]` and `Q̄_t = Q̄_{t-1}·Q_t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Scalar")]
pub struct DiscreteTransition<F> {
    k: usize,
    gamma: Vec<F>,
    beta: Vec<F>,
    q: Vec<Vec<F>>,
    q_bar: Vec<Vec<F>>,
}

impl<F: Scalar> DiscreteTransition<F> {
    /// Cumulative mask probability ramps linearly to `gamma_end` at `T`; the
    /// per-step uniform-replace probability ramps linearly from 0 at `t = 1` to
    /// `beta_uniform_end` at `t = T`.
    pub fn mask_and_replace(
        k: usize,
        steps: usize,
        gamma_end: f64,
        beta_uniform_end: f64,
    ) -> Result<Self> {
        if steps < 1 {
            return Err(Error::param("T", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&gamma_end) {
            return Err(Error::Schedule(format!("gamma_end {gamma_end} outside [0, 1]")));
        }
        if !(0.0..=1.0).contains(&beta_uniform_end) {
            return Err(Error::Schedule(format!(
                "beta_uniform_end {beta_uniform_end} outside [0, 1]"
            )));
        }
        let mut gammas = Vec::with_capacity(steps);
        let mut betas = Vec::with_capacity(steps);
        for t in 1..=steps {
            let cum = gamma_end * t as f64 / steps as f64;
            let cum_prev = gamma_end * (t - 1) as f64 / steps as f64;
            gammas.push(if cum_prev >= 1.0 {
                1.0
            } else {
                1.0 - (1.0 - cum) / (1.0 - cum_prev)
            });
            betas.push(if steps == 1 {
                beta_uniform_end
            } else {
                beta_uniform_end * (t - 1) as f64 / (steps - 1) as f64
            });
        }
        Self::from_rates(k, &gammas, &betas)
    }

    /// Builds the chain from explicit per-step mask (`γ_t`) and replace
    /// (`β_t`) probabilities. Each non-mask token moves to each *other*
    /// non-mask token with probability `β_t / K`.
    pub fn from_rates(k: usize, gammas: &[f64], betas: &[f64]) -> Result<Self> {
        if k < 2 {
            return Err(Error::param("K", format!("{k} must be at least 2")));
        }
        if gammas.is_empty() || gammas.len() != betas.len() {
            return Err(Error::Schedule(format!(
                "{} mask rates vs {} replace rates",
                gammas.len(),
                betas.len()
            )));
        }
        let n = k + 1;
        let mut q = Vec::with_capacity(gammas.len());
        for (i, (&g, &b)) in gammas.iter().zip(betas).enumerate() {
            let t = i + 1;
            if !(0.0..=1.0).contains(&g) || !(0.0..=1.0).contains(&b) {
                return Err(Error::Schedule(format!(
                    "t={t}: gamma {g} / beta {b} outside [0, 1]"
                )));
            }
            let off = b / k as f64;
            let keep = 1.0 - g - off * (k - 1) as f64;
            if keep < -1e-12 {
                return Err(Error::Schedule(format!(
                    "t={t}: mask {g} plus replace {b} exceed total probability 1"
                )));
            }
            let keep = keep.max(0.0);
            let mut m = vec![F::zero(); n * n];
            for from in 0..k {
                for to in 0..k {
                    m[from * n + to] = F::of(if from == to { keep } else { off });
                }
                m[from * n + k] = F::of(g);
            }
            m[k * n + k] = F::one();
            q.push(m);
        }
        let mut q_bar: Vec<Vec<F>> = Vec::with_capacity(q.len());
        for (i, m) in q.iter().enumerate() {
            let next = if i == 0 {
                m.clone()
            } else {
                matmul_square(&q_bar[i - 1], m, n)
            };
            q_bar.push(next);
        }
        Ok(Self {
            k,
            gamma: gammas.iter().map(|&g| F::of(g)).collect(),
            beta: betas.iter().map(|&b| F::of(b)).collect(),
            q,
            q_bar,
        })
    }

    /// Codebook size `K` (excluding the mask token).
    pub fn codebook_size(&self) -> usize {
        self.k
    }

    pub fn mask_index(&self) -> usize {
        self.k
    }

    pub fn num_states(&self) -> usize {
        self.k + 1
    }

    pub fn steps(&self) -> usize {
        self.q.len()
    }

    pub fn gamma(&self, t: usize) -> F {
        self.gamma[t - 1]
    }

    pub fn beta(&self, t: usize) -> F {
        self.beta[t - 1]
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::param("t", format!("{t} outside 1..={}", self.steps())));
        }
        Ok(())
    }

    /// `q(x_t = to | x_{t-1} = from)`.
    pub fn q(&self, t: usize, from: usize, to: usize) -> F {
        self.q[t - 1][from * self.num_states() + to]
    }

    /// `q(x_t = to | x_0 = from)`; `t = 0` is the identity.
    pub fn q_bar(&self, t: usize, from: usize, to: usize) -> F {
        if t == 0 {
            if from == to {
                F::one()
            } else {
                F::zero()
            }
        } else {
            self.q_bar[t - 1][from * self.num_states() + to]
        }
    }

    /// Row-major `(K+1)×(K+1)` single-step matrix.
    pub fn q_matrix(&self, t: usize) -> &[F] {
        &self.q[t - 1]
    }

    pub fn q_bar_matrix(&self, t: usize) -> &[F] {
        &self.q_bar[t - 1]
    }

    pub fn q_bar_row(&self, t: usize, from: usize) -> &[F] {
        let n = self.num_states();
        &self.q_bar[t - 1][from * n..(from + 1) * n]
    }

    /// Samples `x_t ~ q(x_t | x_0)` independently per position.
    pub fn forward_sample<R: Rng + ?Sized>(
        &self,
        x0: &TokenMap,
        t: usize,
        rng: &mut R,
    ) -> Result<TokenMap> {
        self.check_t(t)?;
        x0.validate(self.k, false)?;
        let tokens = x0
            .tokens
            .iter()
            .map(|&tok| sample_categorical(self.q_bar_row(t, tok), rng))
            .collect();
        Ok(TokenMap {
            height: x0.height,
            width: x0.width,
            tokens,
        })
    }

    /// Unnormalized `q(x_{t-1} = k | x_t, x_0)` weights and their sum.
    fn posterior_weights(&self, xt: usize, x0: usize, t: usize) -> (Vec<F>, F) {
        let n = self.num_states();
        let w: Vec<F> = (0..n)
            .map(|k| self.q(t, k, xt) * self.q_bar(t - 1, x0, k))
            .collect();
        let z = w.iter().copied().sum::<F>();
        (w, z)
    }

    /// `q(x_{t-1} | x_t, x_0)` as a distribution over the `K + 1` states.
    pub fn posterior(&self, xt: usize, x0: usize, t: usize) -> Result<Vec<F>> {
        self.check_t(t)?;
        if xt > self.k || x0 >= self.k {
            return Err(Error::param(
                "token",
                format!("xt={xt} / x0={x0} out of range for K={}", self.k),
            ));
        }
        let (mut w, z) = self.posterior_weights(xt, x0, t);
        if !(z > F::zero()) {
            return Err(Error::Inconsistency(format!(
                "x_t={xt} is unreachable from x_0={x0} at t={t}"
            )));
        }
        w.iter_mut().for_each(|v| *v /= z);
        Ok(w)
    }

    /// Like [`posterior`](Self::posterior) but returns `None` for unreachable
    /// pairs instead of an error.
    pub fn posterior_if_reachable(&self, xt: usize, x0: usize, t: usize) -> Option<Vec<F>> {
        let (mut w, z) = self.posterior_weights(xt, x0, t);
        if z > F::zero() {
            w.iter_mut().for_each(|v| *v /= z);
            Some(w)
        } else {
            None
        }
    }

    /// `(K+1)×K` matrix (row-major, rows = `x_{t-1}`, columns = `x̃_0`) of
    /// posteriors for a fixed `x_t`; unreachable columns are zero.
    pub fn posterior_matrix(&self, xt: usize, t: usize) -> Vec<F> {
        let n = self.num_states();
        let mut m = vec![F::zero(); n * self.k];
        for x0 in 0..self.k {
            if let Some(p) = self.posterior_if_reachable(xt, x0, t) {
                for (row, v) in p.into_iter().enumerate() {
                    m[row * self.k + x0] = v;
                }
            }
        }
        m
    }
}

fn matmul_square<F: Scalar>(a: &[F], b: &[F], n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            if aik == F::zero() {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    out
}

/// Draws an index from an (approximately) normalized probability vector.
pub fn sample_categorical<F: Scalar, R: Rng + ?Sized>(probs: &[F], rng: &mut R) -> usize {
    let total: f64 = probs.iter().map(|p| p.as_f64()).sum();
    let u: f64 = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last_nonzero = 0;
    for (i, p) in probs.iter().enumerate() {
        let p = p.as_f64();
        if p > 0.0 {
            last_nonzero = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    last_nonzero
}

/// Spatial map of discrete tokens; values in `0..=K` where `K` is the mask.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenMap {
    pub height: usize,
    pub width: usize,
    pub tokens: Vec<usize>,
}

impl TokenMap {
    pub fn new(height: usize, width: usize, tokens: Vec<usize>) -> Result<Self> {
        if tokens.len() != height * width {
            return Err(Error::Shape(format!(
                "{} tokens for a {height}x{width} map",
                tokens.len()
            )));
        }
        Ok(Self {
            height,
            width,
            tokens,
        })
    }

    pub fn filled(height: usize, width: usize, token: usize) -> Self {
        Self {
            height,
            width,
            tokens: vec![token; height * width],
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, y: usize, x: usize) -> usize {
        self.tokens[y * self.width + x]
    }

    pub fn mask_count(&self, k: usize) -> usize {
        self.tokens.iter().filter(|&&t| t == k).count()
    }

    /// Checks every token is in `0..=K` (`0..K` unless `allow_mask`).
    pub fn validate(&self, k: usize, allow_mask: bool) -> Result<()> {
        let limit = if allow_mask { k } else { k - 1 };
        match self.tokens.iter().position(|&t| t > limit) {
            Some(i) => Err(Error::param(
                "token",
                format!("token {} at index {i} exceeds {limit}", self.tokens[i]),
            )),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, Array1};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_schedule_lengths_and_products() {
        let s = ContinuousSchedule::<f64>::linear(2000, 1e-4, 0.02).unwrap();
        assert_eq!(s.steps(), 2000);
        let one = ContinuousSchedule::<f64>::linear(1, 0.1, 0.1).unwrap();
        assert!((one.alpha_bar(1) - 0.9).abs() < 1e-15);
        let two = ContinuousSchedule::<f64>::linear(2, 0.1, 0.2).unwrap();
        assert!((two.alpha_bar(1) - 0.9).abs() < 1e-15);
        assert!((two.alpha_bar(2) - 0.72).abs() < 1e-15);
    }

    #[test]
    fn schedule_invariants() {
        let s = ContinuousSchedule::<f64>::linear(500, 1e-4, 0.05).unwrap();
        let mut prod = 1.0;
        for t in 1..=s.steps() {
            let b = s.beta(t);
            assert!(b > 0.0 && b < 1.0);
            assert!(s.sigma2(t) > 0.0);
            prod *= 1.0 - b;
            assert!((s.alpha_bar(t) - prod).abs() <= 1e-12 * prod);
            if t > 1 {
                assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            }
        }
        let p = ContinuousSchedule::<f64>::linear_with(50, 1e-3, 0.05, ReverseVariance::Posterior)
            .unwrap();
        assert!((1..=50).all(|t| p.sigma2(t) > 0.0));
    }

    #[test]
    fn schedule_errors_name_bound() {
        let e = ContinuousSchedule::<f64>::linear(10, 0.0, 0.1).unwrap_err();
        assert!(e.to_string().contains("beta_start"));
        let e = ContinuousSchedule::<f64>::linear(10, 0.1, 1.0).unwrap_err();
        assert!(e.to_string().contains("beta_end"));
        let e = ContinuousSchedule::<f64>::linear(10, 0.2, 0.1).unwrap_err();
        assert!(e.to_string().contains("beta_start"));
        let e = ContinuousSchedule::<f64>::linear(0, 0.1, 0.2).unwrap_err();
        assert!(e.to_string().contains("`T`"));
    }

    #[test]
    fn forward_sample_cases() {
        let s = ContinuousSchedule::<f64>::linear(2, 0.1, 0.2).unwrap();
        let x0 = arr1(&[1.0]);
        let out = s.forward_sample(x0.view(), 2, arr1(&[1.0]).view()).unwrap();
        assert!((out[0] - (0.72f64.sqrt() + 0.28f64.sqrt())).abs() < 1e-15);

        let x0 = arr1(&[0.3, -0.7]);
        let zero = Array1::zeros(2);
        let out = s.forward_sample(x0.view(), 1, zero.view()).unwrap();
        assert_eq!(out, x0.mapv(|v| 0.9f64.sqrt() * v));

        let long = ContinuousSchedule::<f64>::linear(1000, 0.01, 0.05).unwrap();
        let noise = arr1(&[0.4, -1.2]);
        let out = long.forward_sample(x0.view(), 1000, noise.view()).unwrap();
        assert!((&out - &noise).iter().all(|d| d.abs() < 1e-6));

        let err = s.forward_sample(x0.view(), 1, arr1(&[1.0]).view());
        assert!(matches!(err, Err(Error::Shape(_))));
        assert!(s.forward_sample(x0.view(), 3, x0.view()).is_err());
    }

    #[test]
    fn posterior_mean_cases() {
        let s = ContinuousSchedule::<f64>::linear(100, 1e-6, 1e-5).unwrap();
        let x = arr1(&[0.5, -0.25, 1.0]);
        let m = s.posterior_mean(x.view(), x.view(), 50).unwrap();
        assert!((&m - &x).iter().all(|d| d.abs() < 1e-3));

        let s = ContinuousSchedule::<f64>::linear(100, 1e-4, 0.02).unwrap();
        let xt = arr1(&[0.1, 0.9, -0.4]);
        let a = 2.5;
        let lhs = s
            .posterior_mean(x.mapv(|v| a * v).view(), xt.mapv(|v| a * v).view(), 40)
            .unwrap();
        let rhs = s.posterior_mean(x.view(), xt.view(), 40).unwrap() * a;
        assert!((&lhs - &rhs).iter().all(|d| d.abs() < 1e-12));

        assert_eq!(s.posterior_mean(x.view(), xt.view(), 1).unwrap(), x);
        assert!(s.posterior_mean(x.view(), xt.view(), 0).is_err());
        assert!(s.posterior_mean(x.view(), xt.view(), 101).is_err());
    }

    #[test]
    fn respacing_preserves_alpha_bar() {
        let s = ContinuousSchedule::<f64>::linear(1000, 1e-4, 0.02).unwrap();
        let (r, ts) = s.respaced(250, ReverseVariance::Beta).unwrap();
        assert_eq!(r.steps(), 250);
        assert_eq!(ts[0], 1);
        assert_eq!(*ts.last().unwrap(), 1000);
        for (k, &t) in ts.iter().enumerate() {
            assert!((r.alpha_bar(k + 1) - s.alpha_bar(t)).abs() < 1e-12);
        }
        let (same, ts) = s.respaced(1000, ReverseVariance::Beta).unwrap();
        assert_eq!(ts, (1..=1000).collect::<Vec<_>>());
        assert!((same.beta(10) - s.beta(10)).abs() < 1e-12);
    }

    #[test]
    fn mask_replace_identity_and_small_case() {
        let id = DiscreteTransition::<f64>::mask_and_replace(4, 5, 0.0, 0.0).unwrap();
        for t in 1..=5 {
            for i in 0..5 {
                for j in 0..5 {
                    assert_eq!(id.q(t, i, j), if i == j { 1.0 } else { 0.0 });
                }
            }
        }
        let one = DiscreteTransition::<f64>::mask_and_replace(2, 1, 0.5, 0.0).unwrap();
        assert_eq!(one.q_matrix(1)[0..3], [0.5, 0.0, 0.5]);
        assert_eq!(one.q_matrix(1)[6..9], [0.0, 0.0, 1.0]);
    }

    #[test]
    fn mask_replace_rows_are_stochastic() {
        let d = DiscreteTransition::<f64>::mask_and_replace(6, 40, 0.9, 0.1).unwrap();
        for t in 1..=40 {
            for m in [d.q_matrix(t), d.q_bar_matrix(t)] {
                for row in m.chunks(7) {
                    assert!(row.iter().all(|&v| v >= 0.0));
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-10);
                }
            }
            assert_eq!(d.q(t, 6, 6), 1.0);
        }
        assert!((d.q_bar(40, 0, 6) - 0.9).abs() < 1e-10);
    }

    #[test]
    fn schedule_overflow_is_rejected() {
        let err = DiscreteTransition::<f64>::from_rates(3, &[0.6], &[0.9]).unwrap_err();
        assert!(matches!(err, Error::Schedule(_)));
        assert!(DiscreteTransition::<f64>::from_rates(1, &[0.1], &[0.1]).is_err());
        assert!(DiscreteTransition::<f64>::mask_and_replace(3, 5, 1.5, 0.0).is_err());
    }

    #[test]
    fn forward_sample_discrete_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = TokenMap::new(4, 4, (0..16).map(|i| i % 3).collect()).unwrap();
        let id = DiscreteTransition::<f64>::mask_and_replace(3, 10, 0.0, 0.0).unwrap();
        assert_eq!(id.forward_sample(&x0, 7, &mut rng).unwrap(), x0);

        let absorb = DiscreteTransition::<f64>::mask_and_replace(3, 10, 1.0, 0.0).unwrap();
        let xt = absorb.forward_sample(&x0, 10, &mut rng).unwrap();
        assert_eq!(xt.mask_count(3), 16);

        let a = id.forward_sample(&x0, 3, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = id.forward_sample(&x0, 3, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);

        let masked = TokenMap::filled(2, 2, 3);
        assert!(id.forward_sample(&masked, 1, &mut rng).is_err());
    }

    #[test]
    fn posterior_identity_and_inconsistency() {
        let id = DiscreteTransition::<f64>::mask_and_replace(3, 4, 0.0, 0.0).unwrap();
        let p = id.posterior(1, 1, 3).unwrap();
        assert_eq!(p, vec![0.0, 1.0, 0.0, 0.0]);
        assert!(matches!(id.posterior(2, 1, 3), Err(Error::Inconsistency(_))));
        assert!(id.posterior(1, 1, 0).is_err());
    }

    #[test]
    fn posterior_is_normalized_on_random_triples() {
        let d = DiscreteTransition::<f64>::mask_and_replace(5, 20, 0.9, 0.2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let t = rng.random_range(2..=20);
            let x0 = rng.random_range(0..5);
            let xt = rng.random_range(0..6);
            if let Ok(p) = d.posterior(xt, x0, t) {
                assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-10);
                assert!(p.iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn token_map_validation() {
        assert!(TokenMap::new(2, 2, vec![0, 1, 2]).is_err());
        let m = TokenMap::new(1, 3, vec![0, 1, 2]).unwrap();
        assert!(m.validate(2, true).is_ok());
        assert!(m.validate(2, false).is_err());
        assert!(m.validate(3, false).is_ok());
    }
}
