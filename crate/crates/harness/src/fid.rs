//! Fréchet distance between Gaussian fits of features from a fixed, seeded,
//! randomly initialized convolutional extractor.

use conprediff_core::Scalar;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{Array3, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

pub const MIN_IMAGES: usize = 64;
const REGULARIZER: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidResult {
    pub value: f64,
    /// A covariance was singular and `1e-6·I` was added to both.
    pub regularized: bool,
}

/// conv3×3 → ReLU → 2×2 average pool → conv3×3 → ReLU → global mean and
/// standard deviation per channel.
#[derive(Clone, Debug)]
pub struct Extractor {
    w1: Array4<f64>,
    w2: Array4<f64>,
}

const HIDDEN: usize = 16;
const OUT: usize = 24;

fn conv_relu(x: &Array3<f64>, w: &Array4<f64>) -> Array3<f64> {
    let (cin, h, wd) = x.dim();
    let cout = w.dim().0;
    let mut out = Array3::zeros((cout, h, wd));
    for o in 0..cout {
        for y in 0..h {
            for xx in 0..wd {
                let mut s = 0.0;
                for c in 0..cin {
                    for ky in 0..3 {
                        let iy = y as isize + ky as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = xx as isize + kx as isize - 1;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            s += w[[o, c, ky, kx]] * x[[c, iy as usize, ix as usize]];
                        }
                    }
                }
                out[[o, y, xx]] = s.max(0.0);
            }
        }
    }
    out
}

fn pool2(x: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let (oh, ow) = ((h / 2).max(1), (w / 2).max(1));
    Array3::from_shape_fn((c, oh, ow), |(ch, y, xx)| {
        let mut s = 0.0;
        let mut n = 0.0;
        for dy in 0..2 {
            for dx in 0..2 {
                let (iy, ix) = (2 * y + dy, 2 * xx + dx);
                if iy < h && ix < w {
                    s += x[[ch, iy, ix]];
                    n += 1.0;
                }
            }
        }
        s / n
    })
}

impl Extractor {
    pub fn new(channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = |shape: (usize, usize, usize, usize)| {
            let std = (2.0 / (shape.1 * 9) as f64).sqrt();
            Array4::from_shape_simple_fn(shape, || f64::standard_normal(&mut rng) * std)
        };
        let w1 = init((HIDDEN, channels, 3, 3));
        let w2 = init((OUT, HIDDEN, 3, 3));
        Self { w1, w2 }
    }

    pub fn dim(&self) -> usize {
        2 * OUT
    }

    pub fn features(&self, image: &Array3<f32>) -> Vec<f64> {
        let x = image.mapv(|v| v as f64);
        let h1 = pool2(&conv_relu(&x, &self.w1));
        let h2 = conv_relu(&h1, &self.w2);
        let mut f = Vec::with_capacity(self.dim());
        for ch in h2.outer_iter() {
            let n = ch.len() as f64;
            let m = ch.sum() / n;
            let v = ch.iter().map(|a| (a - m).powi(2)).sum::<f64>() / n;
            f.push(m);
            f.push(v.sqrt());
        }
        f
    }
}

struct Gaussian {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

fn fit(mut rows: Vec<Vec<f64>>) -> Gaussian {
    // a canonical order makes the statistics exactly order-independent
    rows.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let n = rows.len() as f64;
    let d = rows[0].len();
    let mut mean = DVector::zeros(d);
    for r in &rows {
        mean += DVector::from_column_slice(r);
    }
    mean /= n;
    let mut cov = DMatrix::zeros(d, d);
    for r in &rows {
        let c = DVector::from_column_slice(r) - &mean;
        cov += &c * c.transpose();
    }
    cov /= n - 1.0;
    Gaussian { mean, cov }
}

fn sym(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(sym(m));
    let s = DMatrix::from_diagonal(&e.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &e.eigenvectors * s * e.eigenvectors.transpose()
}

/// `tr((√A B √A)^{1/2})` with negative eigenvalues clamped to zero.
fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let ra = psd_sqrt(a);
    let m = sym(&(&ra * b * &ra));
    SymmetricEigen::new(m).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum()
}

fn is_singular(m: &DMatrix<f64>) -> bool {
    let e = SymmetricEigen::new(sym(m)).eigenvalues;
    let max = e.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    let min = e.iter().fold(f64::INFINITY, |a, &v| a.min(v));
    min <= 1e-12 * max.max(1.0)
}

pub fn frechet_distance(real: &[Vec<f64>], fake: &[Vec<f64>]) -> FidResult {
    let (a, b) = (fit(real.to_vec()), fit(fake.to_vec()));
    let regularized = is_singular(&a.cov) || is_singular(&b.cov);
    let (ca, cb) = if regularized {
        let eye = DMatrix::identity(a.cov.nrows(), a.cov.ncols()) * REGULARIZER;
        (&a.cov + &eye, &b.cov + eye)
    } else {
        (a.cov, b.cov)
    };
    let dm = (&a.mean - &b.mean).norm_squared();
    let cross = 0.5 * (trace_sqrt_product(&ca, &cb) + trace_sqrt_product(&cb, &ca));
    let value = (dm + (ca.trace() + cb.trace()) - 2.0 * cross).max(0.0);
    FidResult { value, regularized }
}

/// Fréchet distance of extractor features; both sides need `MIN_IMAGES` images.
pub fn fid_proxy(real: &[Array3<f32>], fake: &[Array3<f32>], extractor_seed: u64) -> Result<FidResult> {
    if real.len() < MIN_IMAGES || fake.len() < MIN_IMAGES {
        return Err(HarnessError::Config(format!(
            "fid_proxy needs at least {MIN_IMAGES} images per side, got {} and {}",
            real.len(),
            fake.len()
        )));
    }
    let c = real[0].dim().0;
    if real.iter().chain(fake).any(|i| i.dim().0 != c) {
        return Err(HarnessError::Config("fid_proxy inputs differ in channel count".into()));
    }
    let ex = Extractor::new(c, extractor_seed);
    let fr: Vec<_> = real.iter().map(|i| ex.features(i)).collect();
    let ff: Vec<_> = fake.iter().map(|i| ex.features(i)).collect();
    Ok(frechet_distance(&fr, &ff))
}
