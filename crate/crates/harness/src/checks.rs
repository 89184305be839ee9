//! Standalone numerical checks behind `verify-bound` and `bench-setloss`.

use std::time::Instant;

use conprediff_core::diffusion_core::{assemble_psi, verify_upper_bound};
use conprediff_core::set_losses::{brute_force_w2, chamfer, chamfer_one_sided, hungarian_w2, sinkhorn};
use conprediff_core::NeighborIndex;
use ndarray::{Array2, Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::report::median;

#[derive(Clone, Debug, Serialize)]
pub struct BoundFuzz {
    pub cases: usize,
    pub violations: usize,
    /// Smallest `rhs − lhs` seen.
    pub min_slack: f64,
    pub equality_cases: usize,
    /// Largest `|rhs − lhs|` when every prediction at a position is equal.
    pub equality_max_gap: f64,
}

impl BoundFuzz {
    pub fn passed(&self) -> bool {
        self.violations == 0 && self.min_slack >= -1e-9 && self.equality_max_gap <= 1e-9
    }
}

/// Random `x̂_0` and context predictions on maps up to 8×8, strides 1–3.
pub fn fuzz_bound(cases: usize, seed: u64) -> Result<BoundFuzz> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let indices: Vec<_> = (1..=3).map(NeighborIndex::new).collect::<std::result::Result<_, _>>()?;
    let mut out = BoundFuzz { cases, violations: 0, min_slack: f64::INFINITY, equality_cases: 0, equality_max_gap: 0.0 };
    for _ in 0..cases {
        let (h, w, d) = (rng.random_range(1..=8), rng.random_range(1..=8), rng.random_range(1..=4));
        let idx = &indices[rng.random_range(0..3)];
        let scale = [0.1, 1.0, 10.0][rng.random_range(0..3)];
        let mut draw = |shape: &[usize]| {
            ndarray::ArrayD::from_shape_simple_fn(shape, || rng.random_range(-scale..scale))
        };
        let x0 = draw(&[h, w, d]).into_dimensionality::<ndarray::Ix3>().expect("3-d");
        let point = draw(&[h, w, d]).into_dimensionality::<ndarray::Ix3>().expect("3-d");
        let nbr = draw(&[h, w, idx.count(), d]).into_dimensionality::<ndarray::Ix4>().expect("4-d");
        let psi = assemble_psi(point.view(), nbr.view(), idx)?;
        let r = verify_upper_bound(x0.view(), psi.view())?;
        let slack = r.rhs - r.lhs;
        out.min_slack = out.min_slack.min(slack);
        if slack < -1e-9 || !r.holds {
            out.violations += 1;
        }
    }
    // all slots at a position predict the same vector: lhs = rhs
    let eq_cases = (cases / 10).max(1);
    for _ in 0..eq_cases {
        let (h, w, d) = (rng.random_range(1..=8), rng.random_range(1..=8), rng.random_range(1..=4));
        let idx = &indices[rng.random_range(0..3)];
        let x0 = Array3::from_shape_simple_fn((h, w, d), || rng.random_range(-2.0..2.0));
        let v = Array3::from_shape_simple_fn((h, w, d), || rng.random_range(-2.0..2.0));
        let psi = Array4::from_shape_fn((h, w, idx.count() + 1, d), |(y, x, _, c)| v[[y, x, c]]);
        let r = verify_upper_bound(x0.view(), psi.view())?;
        out.equality_cases += 1;
        out.equality_max_gap = out.equality_max_gap.max((r.rhs - r.lhs).abs());
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize)]
pub struct OtSuite {
    pub instances: usize,
    pub hungarian_vs_brute_max_gap: f64,
    pub permutation_failures: usize,
    pub symmetry_max_gap: f64,
    pub chamfer_violations: usize,
    pub sinkhorn_cases: usize,
    pub sinkhorn_max_rel_err: f64,
}

impl OtSuite {
    pub fn passed(&self) -> bool {
        self.hungarian_vs_brute_max_gap <= 1e-9
            && self.permutation_failures == 0
            && self.symmetry_max_gap <= 1e-12
            && self.chamfer_violations == 0
            && self.sinkhorn_max_rel_err <= 0.01
    }
}

fn random_set(rng: &mut ChaCha8Rng, q: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((q, d), || rng.random_range(-2.0..2.0))
}

/// Points on a grid of spacing 3 with a small perturbation each side, so the
/// optimal matching is unique by a wide margin.
fn separated_pair(rng: &mut ChaCha8Rng, q: usize, d: usize) -> (Array2<f64>, Array2<f64>) {
    let t = Array2::from_shape_fn((q, d), |(i, c)| if c == 0 { 3.0 * i as f64 } else { 0.0 } + rng.random_range(-0.2..0.2));
    let mut order: Vec<usize> = (0..q).collect();
    order.shuffle(rng);
    let p = t.select(Axis(0), &order).mapv(|v| v + rng.random_range(-0.2..0.2));
    (t, p)
}

/// Exact, relaxed and greedy set losses against each other; q ∈ 2..=6, d ∈ {1, 2, 8}.
pub fn ot_suite(instances: usize, seed: u64) -> Result<OtSuite> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = OtSuite {
        instances,
        hungarian_vs_brute_max_gap: 0.0,
        permutation_failures: 0,
        symmetry_max_gap: 0.0,
        chamfer_violations: 0,
        sinkhorn_cases: 0,
        sinkhorn_max_rel_err: 0.0,
    };
    for i in 0..instances {
        let q = rng.random_range(2..=6);
        let d = [1, 2, 8][rng.random_range(0..3)];
        let t = random_set(&mut rng, q, d);
        let p = random_set(&mut rng, q, d);
        let h = hungarian_w2(t.view(), p.view())?.cost;
        let b = brute_force_w2(t.view(), p.view())?.cost;
        s.hungarian_vs_brute_max_gap = s.hungarian_vs_brute_max_gap.max((h - b).abs());
        let mut order: Vec<usize> = (0..q).collect();
        order.shuffle(&mut rng);
        let shuffled = p.select(Axis(0), &order);
        let ts = t.select(Axis(0), &order);
        if hungarian_w2(t.view(), shuffled.view())?.cost != h || hungarian_w2(ts.view(), p.view())?.cost != h {
            s.permutation_failures += 1;
        }
        let swapped = hungarian_w2(p.view(), t.view())?.cost;
        s.symmetry_max_gap = s.symmetry_max_gap.max((h - swapped).abs());
        if chamfer_one_sided(t.view(), p.view())? > h + 1e-12 || chamfer_one_sided(p.view(), t.view())? > h + 1e-12 {
            s.chamfer_violations += 1;
        }
        // every fifth instance also runs Sinkhorn on a well-separated pair
        if i % 5 == 0 {
            let (a, c) = separated_pair(&mut rng, q, d);
            let exact = hungarian_w2(a.view(), c.view())?.cost;
            let sk = sinkhorn(a.view(), c.view(), 1e-3, 20_000, 1e-9)?;
            s.sinkhorn_cases += 1;
            s.sinkhorn_max_rel_err = s.sinkhorn_max_rel_err.max((sk.cost - exact).abs() / exact.max(1e-12));
        }
    }
    Ok(s)
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchRow {
    pub method: &'static str,
    pub q: usize,
    pub d: usize,
    /// Median microseconds per call.
    pub micros: f64,
}

/// Median timing of each set loss over `reps` random pairs per size.
pub fn bench_setloss(sizes: &[usize], d: usize, reps: usize, seed: u64) -> Result<Vec<BenchRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for &q in sizes {
        let pairs: Vec<_> = (0..reps.max(1)).map(|_| (random_set(&mut rng, q, d), random_set(&mut rng, q, d))).collect();
        let mut time = |method: &'static str, f: &dyn Fn(&Array2<f64>, &Array2<f64>) -> Result<f64>| -> Result<()> {
            let mut us = Vec::with_capacity(pairs.len());
            for (a, b) in &pairs {
                let t0 = Instant::now();
                std::hint::black_box(f(a, b)?);
                us.push(t0.elapsed().as_secs_f64() * 1e6);
            }
            rows.push(BenchRow { method, q, d, micros: median(&mut us) });
            Ok(())
        };
        time("hungarian", &|a, b| Ok(hungarian_w2(a.view(), b.view())?.cost))?;
        time("sinkhorn", &|a, b| Ok(sinkhorn(a.view(), b.view(), 1e-2, 2_000, 1e-6)?.cost))?;
        time("chamfer", &|a, b| Ok(chamfer(a.view(), b.view())?))?;
        if q <= 7 {
            time("brute_force", &|a, b| Ok(brute_force_w2(a.view(), b.view())?.cost))?;
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_fuzz_passes() {
        let r = fuzz_bound(200, 1).unwrap();
        assert!(r.passed(), "{r:?}");
        assert_eq!(r.equality_cases, 20);
    }

    #[test]
    fn small_ot_suite_passes() {
        let r = ot_suite(50, 2).unwrap();
        assert!(r.passed(), "{r:?}");
        assert_eq!(r.sinkhorn_cases, 10);
    }

    #[test]
    fn bench_reports_each_method() {
        let rows = bench_setloss(&[3, 9], 2, 3, 0).unwrap();
        assert_eq!(rows.len(), 7);
        assert!(rows.iter().all(|r| r.micros.is_finite() && r.micros >= 0.0));
    }
}
