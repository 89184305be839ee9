use conprediff_core::autodiff::Tape;
use conprediff_core::context_decoder::{decode_features, gaussian_params, ContextDecoder};
use conprediff_core::corruption::{ContinuousSchedule, DiscreteTransition, TokenMap};
use conprediff_core::denoiser::{denoise_point, time_embedding, DenoiserCfg, DenoiserInput, DenoiserMode};
use conprediff_core::diffusion_core::{
    continuous_objective, discrete_objective, Batch, ConPreDiff, ContextCfg, DecoderVariant,
    LambdaSchedule, ModelCfg, Process, TrainCfg, TrainState,
};
use conprediff_core::nn::{AdamCfg, ParamStore};
use conprediff_core::set_losses::brute_force_w2;
use conprediff_core::Scalar;
use ndarray::{s, Array2, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cfg(mode: DenoiserMode, stride: usize, variant: DecoderVariant) -> ModelCfg {
    ModelCfg {
        denoiser: DenoiserCfg {
            mode,
            in_channels: 2,
            base_channels: 4,
            channel_mults: vec![1],
            time_emb_dim: 4,
            codebook_size: 3,
            token_emb_dim: 2,
            groups: 2,
            timesteps: 5,
            ..DenoiserCfg::default()
        },
        context: ContextCfg {
            stride,
            q: 3,
            variant,
            hidden: vec![5],
            latent_hidden: None,
            ..ContextCfg::default()
        },
        ..ModelCfg::default()
    }
}

fn schedule() -> ContinuousSchedule<f64> {
    ContinuousSchedule::linear(5, 1e-2, 0.3).unwrap()
}

fn image_batch(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Array4<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array4::from_shape_fn((n, c, h, w), |_| rng.random_range(-1.0..1.0))
}

fn flat_grad(store: &ParamStore<f64>, grads: &conprediff_core::autodiff::Gradients<f64>) -> Vec<f64> {
    store
        .iter()
        .flat_map(|(id, _, v)| match grads.param(id) {
            Some(g) => g.iter().copied().collect::<Vec<_>>(),
            None => vec![0.0; v.len()],
        })
        .collect()
}

struct Eval {
    loss: f64,
    assignments: Vec<Vec<usize>>,
}

fn eval_continuous(model: &ConPreDiff<f64>, x0: &Array4<f64>, ts: &[usize], noise: &Array4<f64>, ctx: &ChaCha8Rng) -> Eval {
    let mut tape = Tape::new();
    let obj = continuous_objective(&mut tape, model, &schedule(), x0, ts, noise, &mut ctx.clone()).unwrap();
    Eval { loss: obj.breakdown.total, assignments: obj.assignments }
}

#[test]
fn full_objective_gradient_matches_finite_differences() {
    let x0 = image_batch(2, 2, 4, 4, 1);
    let noise = image_batch(2, 2, 4, 4, 2);
    let ts = [2, 4];
    let ctx = ChaCha8Rng::seed_from_u64(3);
    for variant in [DecoderVariant::Distribution, DecoderVariant::Feature] {
        let mut model = ConPreDiff::<f64>::new(cfg(DenoiserMode::Continuous, 1, variant), 5).unwrap();
        assert!(model.params.num_scalars() <= 1000, "{}", model.params.num_scalars());
        let mut tape = Tape::new();
        let obj = continuous_objective(&mut tape, &model, &schedule(), &x0, &ts, &noise, &mut ctx.clone()).unwrap();
        let analytic = flat_grad(&model.params, &tape.backward(obj.total));
        let base = model.params.flatten();
        let h = 1e-5;
        let mut checked = 0;
        for i in (0..base.len()).step_by(7) {
            let mut p = base.clone();
            p[i] += h;
            model.params.set_flat(&p).unwrap();
            let up = eval_continuous(&model, &x0, &ts, &noise, &ctx);
            p[i] -= 2.0 * h;
            model.params.set_flat(&p).unwrap();
            let down = eval_continuous(&model, &x0, &ts, &noise, &ctx);
            if up.assignments != obj.assignments || down.assignments != obj.assignments {
                continue;
            }
            let fd = (up.loss - down.loss) / (2.0 * h);
            let scale = analytic[i].abs().max(fd.abs()).max(1e-3);
            assert!((analytic[i] - fd).abs() / scale < 1e-4, "{variant:?} param {i}: {} vs {fd}", analytic[i]);
            checked += 1;
        }
        model.params.set_flat(&base).unwrap();
        assert!(checked > 50);
    }
}

#[test]
fn context_term_matches_brute_force() {
    let x0 = image_batch(1, 2, 4, 4, 7);
    let noise = image_batch(1, 2, 4, 4, 8);
    let t = 3;
    let sched = schedule();
    let xt = sched.forward_sample(x0.view(), t, noise.view()).unwrap();
    for variant in [DecoderVariant::Distribution, DecoderVariant::Feature] {
        let model = ConPreDiff::<f64>::new(cfg(DenoiserMode::Continuous, 1, variant), 9).unwrap();
        let ctx = ChaCha8Rng::seed_from_u64(10);
        let mut tape = Tape::new();
        let obj = continuous_objective(&mut tape, &model, &sched, &x0, &[t], &noise, &mut ctx.clone()).unwrap();

        let tap = denoise_point(&model.denoiser, &model.params, DenoiserInput::Continuous(&xt), &[t]).unwrap().tap;
        let temb = time_embedding::<f64>(t, model.cfg.denoiser.time_emb_dim).unwrap();
        let index = model.neighbors.as_ref().unwrap();
        let q = model.cfg.context.q;
        let truth = |y: usize, x: usize| x0.slice(s![0, .., y, x]).to_owned();
        let mut rng = ctx.clone();
        let mut total = 0.0;
        match model.head.as_ref().unwrap() {
            ContextDecoder::Distribution(dec) => {
                let z: Vec<f64> = (0..16 * q * 2).map(|_| f64::standard_normal(&mut rng)).collect();
                for y in 0..4 {
                    for x in 0..4 {
                        let p = y * 4 + x;
                        let point = tap.slice(s![0, .., y, x]);
                        let (mu, lv) = gaussian_params(dec, &model.params, point, temb.view()).unwrap();
                        let samples = Array2::from_shape_fn((q, 2), |(j, c)| {
                            mu[c] + (lv[c] / 2.0).exp() * z[(p * q + j) * 2 + c]
                        });
                        let slots = index.sample_slots(q, &mut rng);
                        let mut block = Array2::zeros((q, 2));
                        for (j, &k) in slots.iter().enumerate() {
                            let (ny, nx) = index.resolve(4, 4, y, x, k);
                            block.row_mut(j).assign(&truth(ny, nx));
                        }
                        total += brute_force_w2(block.view(), samples.view()).unwrap().cost;
                    }
                }
            }
            ContextDecoder::Feature(dec) => {
                for y in 0..4 {
                    for x in 0..4 {
                        let preds = decode_features(dec, &model.params, tap.slice(s![0, .., y, x]), temb.view()).unwrap();
                        for k in 0..index.count() {
                            let (ny, nx) = index.resolve(4, 4, y, x, k);
                            total += (&preds.row(k) - &truth(ny, nx)).mapv(|v| v * v).sum();
                        }
                    }
                }
            }
        }
        let got = obj.breakdown.context_term;
        assert!((got - total).abs() <= 1e-9 * (1.0 + total), "{variant:?}: {got} vs {total}");
    }
}

/// `q(x_{t−1} | x_t, x_0)` by direct enumeration of Bayes' rule.
fn enumerated_posterior(tr: &DiscreteTransition<f64>, xt: usize, x0: usize, t: usize) -> Vec<f64> {
    let n = tr.num_states();
    let prior = |s: usize| {
        if t == 1 {
            if s == x0 { 1.0 } else { 0.0 }
        } else {
            tr.q_bar(t - 1, x0, s)
        }
    };
    let un: Vec<f64> = (0..n).map(|s| tr.q(t, s, xt) * prior(s)).collect();
    let z: f64 = un.iter().sum();
    un.into_iter().map(|v| v / z).collect()
}

#[test]
fn discrete_point_term_matches_enumerated_kl() {
    let model = ConPreDiff::<f64>::new(cfg(DenoiserMode::Discrete, 0, DecoderVariant::Distribution), 4).unwrap();
    let tr = DiscreteTransition::<f64>::mask_and_replace(3, 5, 0.9, 0.1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for t in 1..=5 {
        for _ in 0..4 {
            let x0 = TokenMap::new(2, 2, (0..4).map(|_| rng.random_range(0..3)).collect()).unwrap();
            let xt = tr.forward_sample(&x0, t, &mut rng).unwrap();
            let mut tape = Tape::new();
            let obj = discrete_objective(&mut tape, &model, &tr, std::slice::from_ref(&x0), std::slice::from_ref(&xt), &[t], &mut rng)
                .unwrap();
            let probs = denoise_point(&model.denoiser, &model.params, DenoiserInput::Discrete(std::slice::from_ref(&xt)), &[t])
                .unwrap()
                .primary;
            let mut expected = 0.0;
            for i in 0..4 {
                let (y, x) = (i / 2, i % 2);
                let truth = enumerated_posterior(&tr, xt.tokens[i], x0.tokens[i], t);
                let mut mix = vec![0.0; 4];
                for cand in 0..3 {
                    if tr.q_bar(t, cand, xt.tokens[i]) > 0.0 {
                        let post = enumerated_posterior(&tr, xt.tokens[i], cand, t);
                        for s in 0..4 {
                            mix[s] += probs[[0, cand, y, x]] * post[s];
                        }
                    }
                }
                let z: f64 = mix.iter().sum();
                for s in 0..4 {
                    if truth[s] > 0.0 {
                        expected += truth[s] * (truth[s] / (mix[s] / z)).ln();
                    }
                }
            }
            let got = obj.breakdown.point_term;
            assert!((got - expected).abs() < 1e-9, "t = {t}: {got} vs {expected}");
        }
    }
}

fn train_cfg() -> TrainCfg {
    TrainCfg { adam: AdamCfg { lr: 5e-3, ..AdamCfg::default() }, ..TrainCfg::default() }
}

#[test]
fn zero_lambda_follows_head_free_trajectory() {
    let mut with_head = cfg(DenoiserMode::Continuous, 1, DecoderVariant::Distribution);
    with_head.context.lambda = LambdaSchedule::Constant { value: 0.0 };
    let without = cfg(DenoiserMode::Continuous, 0, DecoderVariant::Distribution);
    let batch = Batch::Continuous(image_batch(3, 2, 4, 4, 20));
    let process = Process::Continuous(schedule());
    let mut a = TrainState::new(ConPreDiff::<f64>::new(with_head, 77).unwrap(), train_cfg(), 77);
    let mut b = TrainState::new(ConPreDiff::<f64>::new(without, 77).unwrap(), train_cfg(), 77);
    for _ in 0..10 {
        let la = a.train_step(&batch, &process).unwrap();
        let lb = b.train_step(&batch, &process).unwrap();
        assert_eq!(la.point_term, lb.point_term);
        assert_eq!(la.total, lb.total);
    }
    for (id, name, v) in b.model.params.iter() {
        let other = a.model.params.id(name).map(|i| a.model.params.get(i)).unwrap();
        assert_eq!(v, other, "{name} ({})", id.index());
    }
}

#[test]
fn training_reduces_the_loss() {
    for mode in [DenoiserMode::Continuous, DenoiserMode::Discrete] {
        let model = ConPreDiff::<f64>::new(cfg(mode, 1, DecoderVariant::Distribution), 3).unwrap();
        let (batch, process) = match mode {
            DenoiserMode::Continuous => (Batch::Continuous(image_batch(4, 2, 4, 4, 30)), Process::Continuous(schedule())),
            DenoiserMode::Discrete => {
                let maps = (0..4)
                    .map(|i| TokenMap::new(4, 4, (0..16).map(|j| (i + j / 4) % 3).collect()).unwrap())
                    .collect();
                let tr = DiscreteTransition::mask_and_replace(3, 5, 0.9, 0.1).unwrap();
                (Batch::Discrete(maps), Process::Discrete(tr))
            }
        };
        let mut state = TrainState::new(model, train_cfg(), 3);
        let eval = |s: &TrainState<f64>| (0..4).map(|k| s.evaluate(&batch, &process, 1000 + k).unwrap().total).sum::<f64>();
        let before = eval(&state);
        for _ in 0..200 {
            state.train_step(&batch, &process).unwrap();
        }
        let after = eval(&state);
        assert!(after < 0.7 * before, "{mode:?}: {before} -> {after}");
    }
}

#[test]
fn cloned_state_resumes_identically() {
    let model = ConPreDiff::<f64>::new(cfg(DenoiserMode::Continuous, 2, DecoderVariant::Feature), 8).unwrap();
    let batch = Batch::Continuous(image_batch(2, 2, 4, 4, 40));
    let process = Process::Continuous(schedule());
    let mut a = TrainState::new(model, train_cfg(), 8);
    for _ in 0..5 {
        a.train_step(&batch, &process).unwrap();
    }
    let mut b = a.clone();
    for _ in 0..5 {
        assert_eq!(a.train_step(&batch, &process).unwrap(), b.train_step(&batch, &process).unwrap());
    }
    assert_eq!(a.model.params.flatten(), b.model.params.flatten());
}

#[test]
fn failed_step_leaves_state_unchanged() {
    let model = ConPreDiff::<f64>::new(cfg(DenoiserMode::Continuous, 1, DecoderVariant::Distribution), 8).unwrap();
    let process = Process::Continuous(schedule());
    let mut state = TrainState::new(model, TrainCfg { divergence_threshold: 1e-12, ..train_cfg() }, 8);
    let before = state.model.params.flatten();
    let batch = Batch::Continuous(image_batch(2, 2, 4, 4, 41));
    let err = state.train_step(&batch, &process).unwrap_err();
    assert!(matches!(err, conprediff_core::Error::Divergence { step: 1, .. }));
    assert_eq!(state.step, 0);
    assert_eq!(state.model.params.flatten(), before);
    let mut x = image_batch(1, 2, 4, 4, 42);
    x.index_axis_mut(Axis(0), 0)[[0, 0, 0]] = f64::NAN;
    let mut healthy = TrainState::new(ConPreDiff::<f64>::new(cfg(DenoiserMode::Continuous, 0, DecoderVariant::Feature), 1).unwrap(), train_cfg(), 1);
    assert!(healthy.train_step(&Batch::Continuous(x), &process).is_err());
    assert_eq!(healthy.step, 0);
}
