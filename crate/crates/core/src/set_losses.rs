//! Permutation-invariant losses between two sample sets.
//!
//! The exact loss is the empirical squared 2-Wasserstein cost under uniform
//! weights: the minimum over bijections `π` of `Σ_j ‖target_j − pred_π(j)‖²`.
//! Chamfer and Sinkhorn are the `O(q²)` surrogates. All losses use the sum
//! convention; [`SetReduction::MeanOverSamples`] divides by `q`.

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Largest set accepted by [`brute_force_w2`].
pub const BRUTE_FORCE_MAX: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SetReduction {
    #[default]
    Sum,
    MeanOverSamples,
}

impl SetReduction {
    pub fn apply<F: Scalar>(self, cost: F, q: usize) -> F {
        match self {
            SetReduction::Sum => cost,
            SetReduction::MeanOverSamples => cost / F::of_usize(q),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult<F> {
    /// Sum of squared distances under `assignment`.
    pub cost: F,
    /// `assignment[j]` is the prediction matched to target `j`.
    pub assignment: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SinkhornResult<F> {
    /// Transport cost `q·Σ P_ij C_ij` (entropy excluded).
    pub cost: F,
    pub plan: Array2<F>,
    pub converged: bool,
    pub iterations: usize,
    pub marginal_violation: F,
}

pub fn squared_distance<F: Scalar>(a: ArrayView1<'_, F>, b: ArrayView1<'_, F>) -> F {
    a.iter()
        .zip(b.iter())
        .fold(F::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y))
}

/// `C_ij = ‖a_i − b_j‖²`.
pub fn pairwise_costs<F: Scalar>(a: ArrayView2<'_, F>, b: ArrayView2<'_, F>) -> Array2<F> {
    Array2::from_shape_fn((a.nrows(), b.nrows()), |(i, j)| {
        squared_distance(a.row(i), b.row(j))
    })
}

// Summing sorted terms makes the total independent of the order in which the
// pairs are visited, so permuting either input leaves the cost bit-identical.
fn canonical_sum<F: Scalar>(mut terms: Vec<F>) -> F {
    terms.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    terms.into_iter().fold(F::zero(), |acc, v| acc + v)
}

fn check_pair<F: Scalar>(targets: ArrayView2<'_, F>, preds: ArrayView2<'_, F>) -> Result<()> {
    if targets.dim() != preds.dim() {
        return Err(Error::Shape(format!(
            "targets {:?} vs predictions {:?}",
            targets.dim(),
            preds.dim()
        )));
    }
    if targets.nrows() == 0 {
        return Err(Error::param("q", "sets must be nonempty"));
    }
    if targets.iter().chain(preds.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite point in matching input".into()));
    }
    Ok(())
}

/// Cost of a given bijection.
pub fn assignment_cost<F: Scalar>(costs: &Array2<F>, assignment: &[usize]) -> F {
    canonical_sum(
        assignment
            .iter()
            .enumerate()
            .map(|(j, &p)| costs[[j, p]])
            .collect(),
    )
}

/// Minimum-cost perfect matching on a square cost matrix (shortest augmenting
/// paths with dual potentials, `O(n³)`). Returns `row → column`.
pub fn linear_sum_assignment<F: Scalar>(cost: &Array2<F>) -> Vec<usize> {
    let n = cost.nrows();
    debug_assert_eq!(n, cost.ncols());
    let inf = F::infinity();
    let mut u = vec![F::zero(); n + 1];
    let mut v = vec![F::zero(); n + 1];
    // col_owner[j]: 1-based row matched to 1-based column j (0 = free)
    let mut col_owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        col_owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = col_owner[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[col_owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if col_owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_owner[j0] = col_owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0; n];
    for j in 1..=n {
        row_to_col[col_owner[j] - 1] = j - 1;
    }
    row_to_col
}

/// Exact empirical W2² between equal-size sets.
pub fn hungarian_w2<F: Scalar>(
    targets: ArrayView2<'_, F>,
    preds: ArrayView2<'_, F>,
) -> Result<MatchResult<F>> {
    check_pair(targets, preds)?;
    let costs = pairwise_costs(targets, preds);
    let assignment = linear_sum_assignment(&costs);
    Ok(MatchResult {
        cost: assignment_cost(&costs, &assignment),
        assignment,
    })
}

/// Exhaustive minimum over all `q!` bijections; refuses `q > 7`.
pub fn brute_force_w2<F: Scalar>(
    targets: ArrayView2<'_, F>,
    preds: ArrayView2<'_, F>,
) -> Result<MatchResult<F>> {
    check_pair(targets, preds)?;
    let q = targets.nrows();
    if q > BRUTE_FORCE_MAX {
        return Err(Error::Size(format!(
            "brute force over {q}! bijections (limit q <= {BRUTE_FORCE_MAX})"
        )));
    }
    let costs = pairwise_costs(targets, preds);
    let mut perm: Vec<usize> = (0..q).collect();
    let mut best = MatchResult {
        cost: assignment_cost(&costs, &perm),
        assignment: perm.clone(),
    };
    // Heap's algorithm
    let mut c = vec![0usize; q];
    let mut i = 0;
    while i < q {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            let cost = assignment_cost(&costs, &perm);
            if cost < best.cost {
                best = MatchResult {
                    cost,
                    assignment: perm.clone(),
                };
            }
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    Ok(best)
}

/// Envelope gradients of the matched cost with the assignment held fixed:
/// `(∂/∂targets, ∂/∂preds)`.
pub fn w2_gradients<F: Scalar>(
    targets: ArrayView2<'_, F>,
    preds: ArrayView2<'_, F>,
    matching: &MatchResult<F>,
) -> (Array2<F>, Array2<F>) {
    let mut gt = Array2::zeros(targets.dim());
    let mut gp = Array2::zeros(preds.dim());
    let two = F::of(2.0);
    for (j, &p) in matching.assignment.iter().enumerate() {
        for k in 0..targets.ncols() {
            let diff = targets[[j, k]] - preds[[p, k]];
            gt[[j, k]] = two * diff;
            gp[[p, k]] = -two * diff;
        }
    }
    (gt, gp)
}

/// `Σ_a min_b ‖a − b‖²`.
pub fn chamfer_one_sided<F: Scalar>(from: ArrayView2<'_, F>, to: ArrayView2<'_, F>) -> Result<F> {
    if from.nrows() == 0 || to.nrows() == 0 {
        return Err(Error::param("set", "Chamfer needs nonempty sets"));
    }
    if from.ncols() != to.ncols() {
        return Err(Error::Shape(format!(
            "point dims {} vs {}",
            from.ncols(),
            to.ncols()
        )));
    }
    Ok(from
        .rows()
        .into_iter()
        .map(|a| {
            to.rows()
                .into_iter()
                .map(|b| squared_distance(a, b))
                .fold(F::infinity(), F::min)
        })
        .fold(F::zero(), |acc, v| acc + v))
}

/// Symmetric two-sided Chamfer; the sets may differ in size.
pub fn chamfer<F: Scalar>(targets: ArrayView2<'_, F>, preds: ArrayView2<'_, F>) -> Result<F> {
    Ok(chamfer_one_sided(targets, preds)? + chamfer_one_sided(preds, targets)?)
}

fn log_sum_exp<F: Scalar>(vals: impl Iterator<Item = F> + Clone) -> F {
    let m = vals.clone().fold(F::neg_infinity(), F::max);
    if m == F::neg_infinity() {
        return m;
    }
    m + vals.map(|v| (v - m).exp()).sum::<F>().ln()
}

/// Entropic OT with uniform marginals, log-domain iterations.
pub fn sinkhorn<F: Scalar>(
    targets: ArrayView2<'_, F>,
    preds: ArrayView2<'_, F>,
    epsilon: F,
    max_iters: usize,
    tol: F,
) -> Result<SinkhornResult<F>> {
    check_pair(targets, preds)?;
    if !(epsilon > F::zero()) {
        return Err(Error::param("epsilon", "must be > 0"));
    }
    let q = targets.nrows();
    let c = pairwise_costs(targets, preds);
    let log_w = -F::of_usize(q).ln();
    let mut f = vec![F::zero(); q];
    let mut g = vec![F::zero(); q];
    let mut violation = F::infinity();
    let mut iterations = 0;
    let plan_of = |f: &[F], g: &[F], eps: F| {
        Array2::from_shape_fn((q, q), |(i, j)| ((f[i] + g[j] - c[[i, j]]) / eps).exp())
    };
    // ε-annealing: halve from the cost scale down to the target, warm-starting
    // the potentials; convergence is only checked at the target ε.
    let cmax = c.iter().copied().fold(F::zero(), F::max);
    let mut eps = cmax.max(epsilon);
    let half = F::of(0.5);
    while iterations < max_iters {
        iterations += 1;
        for i in 0..q {
            let lse = log_sum_exp((0..q).map(|j| (g[j] - c[[i, j]]) / eps + log_w));
            f[i] = -eps * lse;
        }
        for j in 0..q {
            let lse = log_sum_exp((0..q).map(|i| (f[i] - c[[i, j]]) / eps + log_w));
            g[j] = -eps * lse;
        }
        if eps > epsilon {
            eps = (eps * half).max(epsilon);
            continue;
        }
        // P_ij = a_i b_j exp((f_i + g_j − C_ij)/ε) with a = b = 1/q
        let plan = plan_of(&f, &g, eps).mapv(|v| v / F::of_usize(q * q));
        let w = F::one() / F::of_usize(q);
        violation = plan
            .rows()
            .into_iter()
            .map(|r| (r.sum() - w).abs())
            .fold(F::zero(), |a, b| a + b);
        if violation < tol {
            break;
        }
    }
    let plan = plan_of(&f, &g, eps).mapv(|v| v / F::of_usize(q * q));
    let transport = plan
        .iter()
        .zip(c.iter())
        .fold(F::zero(), |acc, (&p, &cc)| acc + p * cc);
    Ok(SinkhornResult {
        cost: transport * F::of_usize(q),
        plan,
        converged: violation < tol,
        iterations,
        marginal_violation: violation,
    })
}
