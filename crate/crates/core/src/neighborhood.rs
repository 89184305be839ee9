//! s-stride neighborhoods, ground-truth context sets, and the mean-pooled
//! combined prediction.
//!
//! A stride-`s` neighborhood is every position within Chebyshev distance `s`
//! of the center, excluding the center, so it has `(2s+1)² − 1` members.
//! Out-of-bounds neighbors are resolved by edge replication, giving every
//! position the same neighbor count.

use ndarray::{Array1, Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    #[default]
    EdgeReplicate,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborIndex {
    stride: usize,
    offsets: Vec<(isize, isize)>,
    padding: Padding,
}

impl NeighborIndex {
    /// Offsets in row-major order (`dy` outer, `dx` inner).
    pub fn new(stride: usize) -> Result<Self> {
        if stride < 1 {
            return Err(Error::param("stride", "must be at least 1"));
        }
        let s = stride as isize;
        let offsets = (-s..=s)
            .flat_map(|dy| (-s..=s).map(move |dx| (dy, dx)))
            .filter(|&o| o != (0, 0))
            .collect();
        Ok(Self {
            stride,
            offsets,
            padding: Padding::EdgeReplicate,
        })
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    /// `K_n = (2s+1)² − 1`.
    pub fn count(&self) -> usize {
        self.offsets.len()
    }

    pub fn offsets(&self) -> &[(isize, isize)] {
        &self.offsets
    }

    pub fn padding(&self) -> Padding {
        self.padding
    }

    pub fn offset_position(&self, dy: isize, dx: isize) -> Option<usize> {
        self.offsets.iter().position(|&o| o == (dy, dx))
    }

    /// Map coordinates of neighbor `k` of `(y, x)` after padding.
    pub fn resolve(&self, height: usize, width: usize, y: usize, x: usize, k: usize) -> (usize, usize) {
        let (dy, dx) = self.offsets[k];
        let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
        (clamp(y as isize + dy, height), clamp(x as isize + dx, width))
    }

    /// Draws `q` neighbor slots uniformly with replacement.
    pub fn sample_slots<R: Rng + ?Sized>(&self, q: usize, rng: &mut R) -> Vec<usize> {
        (0..q).map(|_| rng.random_range(0..self.count())).collect()
    }
}

/// Ground-truth neighbor vectors of `pos` in offset order, `K_n × d`.
pub fn extract_context<F: Scalar>(
    map: ArrayView3<'_, F>,
    pos: (usize, usize),
    index: &NeighborIndex,
) -> Array2<F> {
    let (h, w, d) = map.dim();
    let mut out = Array2::zeros((index.count(), d));
    for (k, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let (y, x) = index.resolve(h, w, pos.0, pos.1, k);
        row.assign(&map.slice(ndarray::s![y, x, ..]));
    }
    out
}

/// `q` rows drawn i.i.d. from the empirical neighborhood distribution.
pub fn sample_context<F: Scalar, R: Rng + ?Sized>(
    map: ArrayView3<'_, F>,
    pos: (usize, usize),
    index: &NeighborIndex,
    q: usize,
    rng: &mut R,
) -> Result<Array2<F>> {
    if q < 1 {
        return Err(Error::param("q", "must be at least 1"));
    }
    let slots = index.sample_slots(q, rng);
    Ok(gather_slots(map, pos, index, &slots))
}

/// Debug variant drawing `q ≤ K_n` distinct neighbors.
pub fn sample_context_without_replacement<F: Scalar, R: Rng + ?Sized>(
    map: ArrayView3<'_, F>,
    pos: (usize, usize),
    index: &NeighborIndex,
    q: usize,
    rng: &mut R,
) -> Result<Array2<F>> {
    if q < 1 || q > index.count() {
        return Err(Error::param(
            "q",
            format!("{q} outside 1..={} without replacement", index.count()),
        ));
    }
    let slots = rand::seq::index::sample(rng, index.count(), q).into_vec();
    Ok(gather_slots(map, pos, index, &slots))
}

fn gather_slots<F: Scalar>(
    map: ArrayView3<'_, F>,
    pos: (usize, usize),
    index: &NeighborIndex,
    slots: &[usize],
) -> Array2<F> {
    let (h, w, d) = map.dim();
    let mut out = Array2::zeros((slots.len(), d));
    for (row, &k) in out.axis_iter_mut(Axis(0)).zip(slots) {
        let (y, x) = index.resolve(h, w, pos.0, pos.1, k);
        let mut row = row;
        row.assign(&map.slice(ndarray::s![y, x, ..]));
    }
    out
}

/// Per-position target sets for a whole map, positions in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextSampleBatch<F> {
    pub positions: Vec<(usize, usize)>,
    /// `P × q × d`.
    pub targets: Array3<F>,
    pub q: usize,
    pub d: usize,
}

pub fn sample_context_batch<F: Scalar, R: Rng + ?Sized>(
    map: ArrayView3<'_, F>,
    index: &NeighborIndex,
    q: usize,
    rng: &mut R,
) -> Result<ContextSampleBatch<F>> {
    let (h, w, d) = map.dim();
    let positions: Vec<_> = (0..h).flat_map(|y| (0..w).map(move |x| (y, x))).collect();
    let mut targets = Array3::zeros((positions.len(), q, d));
    for (p, &pos) in positions.iter().enumerate() {
        let rows = sample_context(map, pos, index, q, rng)?;
        targets.index_axis_mut(Axis(0), p).assign(&rows);
    }
    Ok(ContextSampleBatch {
        positions,
        targets,
        q,
        d,
    })
}

/// Mean over the center prediction and its `K_n` neighbor-slot predictions.
pub fn neighbor_mean_pool<F: Scalar>(psi: ArrayView2<'_, F>) -> Result<Array1<F>> {
    if psi.nrows() == 0 {
        return Err(Error::Shape("empty prediction block".into()));
    }
    let n = F::of_usize(psi.nrows());
    Ok(psi.sum_axis(Axis(0)).mapv(|v| v / n))
}
