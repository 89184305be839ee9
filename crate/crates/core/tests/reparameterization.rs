use conprediff_core::autodiff::Tape;
use conprediff_core::context_decoder::{
    decode_distribution_samples, gaussian_params, DistributionDecoder, DistributionDecoderCfg,
};
use conprediff_core::nn::ParamStore;
use ndarray::{Array1, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn decoder(n_hidden: Option<Vec<usize>>, store: &mut ParamStore<f64>) -> DistributionDecoder {
    let cfg = DistributionDecoderCfg {
        d: 3,
        point_dim: 5,
        t_dim: 4,
        mu_hidden: vec![8],
        sigma_hidden: vec![8],
        n_hidden,
        logvar_min: -10.0,
        logvar_max: 4.0,
    };
    DistributionDecoder::new(store, "ctx", cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
}

fn inputs() -> (Array1<f64>, Array1<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    (
        Array1::from_shape_fn(5, |_| rng.random_range(-1.0..1.0)),
        Array1::from_shape_fn(4, |_| rng.random_range(-1.0..1.0)),
    )
}

#[test]
fn identity_head_reproduces_gaussian_moments() {
    let mut store = ParamStore::new();
    let dec = decoder(None, &mut store);
    let (point, temb) = inputs();
    let (mu, logvar) = gaussian_params(&dec, &store, point.view(), temb.view()).unwrap();
    let n = 100_000;
    let xs = decode_distribution_samples(&dec, &store, point.view(), temb.view(), n, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let nf = n as f64;
    let mean = xs.mean_axis(ndarray::Axis(0)).unwrap();
    for c in 0..3 {
        let var = logvar[c].exp();
        let se = (var / nf).sqrt();
        assert!((mean[c] - mu[c]).abs() < 4.0 * se, "mean {c}: {} vs {}", mean[c], mu[c]);
        let sv = xs.column(c).mapv(|v| (v - mean[c]).powi(2)).sum() / (nf - 1.0);
        let se_var = var * (2.0 / (nf - 1.0)).sqrt();
        assert!((sv - var).abs() < 4.0 * se_var, "var {c}: {sv} vs {var}");
        for e in (c + 1)..3 {
            let cov = xs
                .column(c)
                .iter()
                .zip(xs.column(e))
                .map(|(a, b)| (a - mean[c]) * (b - mean[e]))
                .sum::<f64>()
                / (nf - 1.0);
            let se_cov = (var * logvar[e].exp() / nf).sqrt();
            assert!(cov.abs() < 4.0 * se_cov, "cov {c},{e}: {cov}");
        }
    }
}

/// Sum of the draws for fixed latent noise.
fn draw_sum(dec: &DistributionDecoder, store: &ParamStore<f64>, point: &Array1<f64>, temb: &Array1<f64>) -> f64 {
    decode_distribution_samples(dec, store, point.view(), temb.view(), 6, &mut ChaCha8Rng::seed_from_u64(4))
        .unwrap()
        .sum()
}

#[test]
fn sample_gradient_matches_finite_differences() {
    for n_hidden in [None, Some(vec![4])] {
        let mut store = ParamStore::new();
        let dec = decoder(n_hidden.clone(), &mut store);
        let (point, temb) = inputs();
        let mut tape = Tape::new();
        let p = tape.constant(ArrayD::from_shape_vec(IxDyn(&[1, 5]), point.to_vec()).unwrap());
        let t = tape.constant(ArrayD::from_shape_vec(IxDyn(&[1, 4]), temb.to_vec()).unwrap());
        let out = dec.forward(&mut tape, &store, p, t, 6, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let total = tape.sum(out.samples);
        let grads = tape.backward(total);
        let ids: Vec<_> = store
            .iter()
            .filter(|(_, name, _)| name.starts_with("ctx.mu") || name.starts_with("ctx.sigma"))
            .map(|(id, _, _)| id)
            .collect();
        assert!(!ids.is_empty());
        let h = 1e-5;
        for id in ids {
            let g = grads.param(id).cloned().unwrap_or_else(|| ArrayD::zeros(store.get(id).raw_dim()));
            for i in 0..store.get(id).len() {
                let orig = store.get(id).as_slice().unwrap()[i];
                store.get_mut(id).as_slice_mut().unwrap()[i] = orig + h;
                let up = draw_sum(&dec, &store, &point, &temb);
                store.get_mut(id).as_slice_mut().unwrap()[i] = orig - h;
                let down = draw_sum(&dec, &store, &point, &temb);
                store.get_mut(id).as_slice_mut().unwrap()[i] = orig;
                let fd = (up - down) / (2.0 * h);
                let a = g.as_slice().unwrap()[i];
                let scale = a.abs().max(fd.abs()).max(1e-3);
                assert!((a - fd).abs() / scale < 1e-5, "{} [{i}]: {a} vs {fd} ({n_hidden:?})", store.name(id));
            }
        }
    }
}

#[test]
fn log_variance_is_clamped() {
    let mut store = ParamStore::new();
    let dec = decoder(None, &mut store);
    let bias = store.id("ctx.sigma.out.b").unwrap();
    store.get_mut(bias).fill(50.0);
    let (point, temb) = inputs();
    let (_, lv) = gaussian_params(&dec, &store, point.view(), temb.view()).unwrap();
    assert!(lv.iter().all(|&v| v <= 4.0));
    store.get_mut(bias).fill(-50.0);
    let (_, lv) = gaussian_params(&dec, &store, point.view(), temb.view()).unwrap();
    assert!(lv.iter().all(|&v| v >= -10.0));
}
