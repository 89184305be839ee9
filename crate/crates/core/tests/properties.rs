use conprediff_core::corruption::{ContinuousSchedule, DiscreteTransition, ReverseVariance};
use conprediff_core::diffusion_core::{assemble_psi, lambda_schedule, verify_upper_bound, LambdaSchedule};
use conprediff_core::neighborhood::{extract_context, NeighborIndex};
use conprediff_core::set_losses::{brute_force_w2, chamfer_one_sided, hungarian_w2};
use ndarray::{Array2, Array3, Array4};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-3.0f64..3.0, rows * cols)
        .prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

fn set_pair() -> impl Strategy<Value = (Array2<f64>, Array2<f64>)> {
    (1usize..=6, 1usize..=4).prop_flat_map(|(q, d)| (matrix(q, d), matrix(q, d)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn bound_holds_for_any_predictions(
        h in 1usize..=5,
        w in 1usize..=5,
        s in 1usize..=3,
        d in 1usize..=3,
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let idx = NeighborIndex::new(s).unwrap();
        let x0 = Array3::from_shape_fn((h, w, d), |_| rng.random_range(-2.0..2.0));
        let point = Array3::from_shape_fn((h, w, d), |_| rng.random_range(-2.0..2.0));
        let nbr = Array4::from_shape_fn((h, w, idx.count(), d), |_| rng.random_range(-2.0..2.0));
        let psi = assemble_psi(point.view(), nbr.view(), &idx).unwrap();
        let r = verify_upper_bound(x0.view(), psi.view()).unwrap();
        prop_assert!(r.lhs <= r.rhs + 1e-9, "lhs {} rhs {}", r.lhs, r.rhs);
    }

    #[test]
    fn hungarian_matches_brute_force((t, p) in set_pair()) {
        let a = hungarian_w2(t.view(), p.view()).unwrap().cost;
        let b = brute_force_w2(t.view(), p.view()).unwrap().cost;
        prop_assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()));
    }

    #[test]
    fn w2_is_permutation_invariant_and_symmetric(
        (t, p) in set_pair(),
        perm_seed in any::<u64>(),
    ) {
        use rand::{seq::SliceRandom, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(perm_seed);
        let mut order: Vec<usize> = (0..p.nrows()).collect();
        order.shuffle(&mut rng);
        let shuffled = p.select(ndarray::Axis(0), &order);
        let base = hungarian_w2(t.view(), p.view()).unwrap().cost;
        prop_assert_eq!(base, hungarian_w2(t.view(), shuffled.view()).unwrap().cost);
        let swapped = hungarian_w2(p.view(), t.view()).unwrap().cost;
        prop_assert!((base - swapped).abs() <= 1e-12 * (1.0 + base.abs()));
    }

    #[test]
    fn chamfer_never_exceeds_w2((t, p) in set_pair()) {
        let c = chamfer_one_sided(t.view(), p.view()).unwrap();
        let w = hungarian_w2(t.view(), p.view()).unwrap().cost;
        prop_assert!(c <= w + 1e-12);
    }

    #[test]
    fn schedule_invariants(steps in 1usize..200, lo in 1e-5f64..1e-2, span in 0.0f64..0.3) {
        let s = ContinuousSchedule::<f64>::linear(steps, lo, lo + span).unwrap();
        let ab = s.alpha_bars();
        prop_assert!(ab.iter().all(|&a| a > 0.0 && a < 1.0));
        prop_assert!(ab.windows(2).all(|w| w[1] <= w[0]));
        for t in 1..=steps {
            let (c0, ct) = s.posterior_coefficients(t);
            prop_assert!(c0.is_finite() && ct.is_finite());
            prop_assert!(s.posterior_variance(t) >= 0.0);
        }
        let n = 1 + steps / 3;
        let (r, _) = s.respaced(n, ReverseVariance::Beta).unwrap();
        prop_assert!(r.betas().iter().all(|&b| b > 0.0 && b < 1.0));
    }

    #[test]
    fn transition_rows_are_stochastic(
        k in 2usize..6,
        steps in 1usize..8,
        gamma_end in 0.1f64..0.7,
        beta_end in 0.0f64..0.3,
    ) {
        let tr = DiscreteTransition::<f64>::mask_and_replace(k, steps, gamma_end, beta_end).unwrap();
        let n = tr.num_states();
        for t in 1..=steps {
            for m in [tr.q_matrix(t), tr.q_bar_matrix(t)] {
                for row in m.chunks(n) {
                    prop_assert!(row.iter().all(|&v| v >= 0.0));
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
            // the mask state is absorbing
            prop_assert_eq!(tr.q(t, tr.mask_index(), tr.mask_index()), 1.0);
        }
    }

    #[test]
    fn posteriors_are_normalized(
        k in 2usize..5,
        steps in 2usize..6,
        xt_raw in any::<usize>(),
        x0_raw in any::<usize>(),
        t_raw in any::<usize>(),
    ) {
        let tr = DiscreteTransition::<f64>::mask_and_replace(k, steps, 0.8, 0.2).unwrap();
        let xt = xt_raw % (k + 1);
        let x0 = x0_raw % k;
        let t = 1 + t_raw % steps;
        if let Some(p) = tr.posterior_if_reachable(xt, x0, t) {
            prop_assert!(p.iter().all(|&v| v >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn neighborhood_has_expected_size(s in 1usize..=4, h in 1usize..6, w in 1usize..6) {
        let idx = NeighborIndex::new(s).unwrap();
        prop_assert_eq!(idx.count(), (2 * s + 1).pow(2) - 1);
        prop_assert!(!idx.offsets().contains(&(0, 0)));
        let map = Array3::from_shape_fn((h, w, 1), |(y, x, _)| (y * w + x) as f64);
        let ctx = extract_context(map.view(), (h / 2, w / 2), &idx);
        prop_assert_eq!(ctx.nrows(), idx.count());
    }

    #[test]
    fn lambda_stays_in_unit_interval(
        start in -5.0f64..5.0,
        end in -5.0f64..5.0,
        steps in 1usize..500,
        t_raw in any::<usize>(),
    ) {
        let t = 1 + t_raw % steps;
        let v = lambda_schedule(t, steps, &LambdaSchedule::Linear { start, end });
        prop_assert!((0.0..=1.0).contains(&v));
        let c = lambda_schedule(t, steps, &LambdaSchedule::Constant { value: start });
        prop_assert!((0.0..=1.0).contains(&c));
    }
}
