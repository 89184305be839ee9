//! Image sources: built-in synthetic generators and image directories.
//! All images are `[C, size, size]` with values in `[−1, 1]`.

use std::path::PathBuf;

use ndarray::{Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::image_io;

fn default_count() -> usize {
    256
}
fn default_size() -> usize {
    16
}
fn default_channels() -> usize {
    3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// One to three Gaussian blobs of random color on a dark background.
    Blobs {
        #[serde(default = "default_count")]
        count: usize,
        #[serde(default = "default_size")]
        size: usize,
        #[serde(default = "default_channels")]
        channels: usize,
        #[serde(default)]
        seed: u64,
    },
    /// Two-color checkerboards of random cell size and phase.
    Checkerboard {
        #[serde(default = "default_count")]
        count: usize,
        #[serde(default = "default_size")]
        size: usize,
        #[serde(default = "default_channels")]
        channels: usize,
        #[serde(default)]
        seed: u64,
    },
    /// A warm blob in the upper-left or a cool blob in the lower-right,
    /// jittered by up to one pixel, plus small pixel noise.
    TwoMode {
        #[serde(default = "default_count")]
        count: usize,
        #[serde(default = "default_size")]
        size: usize,
        #[serde(default = "default_channels")]
        channels: usize,
        #[serde(default)]
        seed: u64,
    },
    /// Every decodable image file in `path`, sorted by file name.
    Directory {
        path: PathBuf,
        #[serde(default = "default_size")]
        size: usize,
        #[serde(default = "default_channels")]
        channels: usize,
    },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::TwoMode { count: 256, size: 16, channels: 3, seed: 0 }
    }
}

impl DatasetSpec {
    pub fn size(&self) -> usize {
        match self {
            Self::Blobs { size, .. }
            | Self::Checkerboard { size, .. }
            | Self::TwoMode { size, .. }
            | Self::Directory { size, .. } => *size,
        }
    }

    pub fn channels(&self) -> usize {
        match self {
            Self::Blobs { channels, .. }
            | Self::Checkerboard { channels, .. }
            | Self::TwoMode { channels, .. }
            | Self::Directory { channels, .. } => *channels,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<Array3<f32>>,
    /// One entry per skipped file.
    pub warnings: Vec<String>,
}

fn blob(cy: f32, cx: f32, sigma: f32) -> impl Fn(usize, usize) -> f32 {
    move |y, x| {
        let d2 = (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2);
        (-d2 / (2.0 * sigma * sigma)).exp()
    }
}

fn gen_blobs(rng: &mut ChaCha8Rng, size: usize, channels: usize) -> Array3<f32> {
    let mut img = Array3::from_elem((channels, size, size), -1.0f32);
    let n = rng.random_range(1..=3);
    let s = size as f32;
    for _ in 0..n {
        let f = blob(rng.random_range(0.0..s), rng.random_range(0.0..s), rng.random_range(s / 8.0..s / 4.0));
        let color: Vec<f32> = (0..channels).map(|_| rng.random_range(0.0..2.0)).collect();
        for ((c, y, x), v) in img.indexed_iter_mut() {
            *v += color[c] * f(y, x);
        }
    }
    img.mapv_inplace(|v| v.clamp(-1.0, 1.0));
    img
}

fn gen_checkerboard(rng: &mut ChaCha8Rng, size: usize, channels: usize) -> Array3<f32> {
    let cell = [2usize, 4, 8][rng.random_range(0..3)].min(size.max(1));
    let (py, px) = (rng.random_range(0..cell), rng.random_range(0..cell));
    let a: Vec<f32> = (0..channels).map(|_| rng.random_range(-1.0..1.0)).collect();
    let b: Vec<f32> = (0..channels).map(|_| rng.random_range(-1.0..1.0)).collect();
    Array3::from_shape_fn((channels, size, size), |(c, y, x)| {
        if ((y + py) / cell + (x + px) / cell) % 2 == 0 { a[c] } else { b[c] }
    })
}

const WARM: [f32; 3] = [0.9, 0.5, -0.6];
const COOL: [f32; 3] = [-0.6, 0.3, 0.9];

/// Noise-free template of mode 0 or 1 with a jitter offset.
fn two_mode_template(mode: usize, size: usize, channels: usize, dy: f32, dx: f32) -> Array3<f32> {
    let s = size as f32;
    let (cy, cx, color) = if mode == 0 { (s * 0.3, s * 0.3, WARM) } else { (s * 0.7, s * 0.7, COOL) };
    let f = blob(cy + dy, cx + dx, s / 7.0);
    Array3::from_shape_fn((channels, size, size), |(c, y, x)| {
        let base = -0.8f32;
        let col = if channels == 3 { color[c] } else { color.iter().sum::<f32>() / 3.0 + 0.6 };
        base + (col - base) * f(y, x)
    })
}

/// The two centroids of the two-mode generator (no jitter, no noise).
pub fn two_mode_centroids(size: usize, channels: usize) -> [Array3<f32>; 2] {
    [two_mode_template(0, size, channels, 0.0, 0.0), two_mode_template(1, size, channels, 0.0, 0.0)]
}

fn gen_two_mode(rng: &mut ChaCha8Rng, size: usize, channels: usize) -> Array3<f32> {
    let mode = rng.random_range(0..2);
    let dy = rng.random_range(-1.0..=1.0);
    let dx = rng.random_range(-1.0..=1.0);
    let mut img = two_mode_template(mode, size, channels, dy, dx);
    img.mapv_inplace(|v| (v + rng.random_range(-0.05..0.05)).clamp(-1.0, 1.0));
    img
}

fn synthetic(
    count: usize,
    seed: u64,
    size: usize,
    channels: usize,
    g: fn(&mut ChaCha8Rng, usize, usize) -> Array3<f32>,
) -> Result<Dataset> {
    if count == 0 || size == 0 {
        return Err(HarnessError::Dataset("synthetic dataset with no images".into()));
    }
    if channels != 1 && channels != 3 {
        return Err(HarnessError::Config(format!("channels must be 1 or 3, got {channels}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(Dataset { images: (0..count).map(|_| g(&mut rng, size, channels)).collect(), warnings: Vec::new() })
}

pub fn load_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    match spec {
        DatasetSpec::Blobs { count, size, channels, seed } => synthetic(*count, *seed, *size, *channels, gen_blobs),
        DatasetSpec::Checkerboard { count, size, channels, seed } => {
            synthetic(*count, *seed, *size, *channels, gen_checkerboard)
        }
        DatasetSpec::TwoMode { count, size, channels, seed } => {
            synthetic(*count, *seed, *size, *channels, gen_two_mode)
        }
        DatasetSpec::Directory { path, size, channels } => {
            let rd = std::fs::read_dir(path).map_err(|e| HarnessError::io(path, e))?;
            let mut files: Vec<PathBuf> = rd.filter_map(|e| e.ok()).map(|e| e.path()).filter(|p| p.is_file()).collect();
            files.sort();
            let mut images = Vec::new();
            let mut warnings = Vec::new();
            for f in files {
                match image_io::load_png(&f, *channels, *size) {
                    Ok(img) => images.push(img),
                    Err(e) => {
                        log::warn!("skipping {}: {e}", f.display());
                        warnings.push(format!("skipped {}: {e}", f.display()));
                    }
                }
            }
            if images.is_empty() {
                return Err(HarnessError::Dataset(format!("no readable images in {}", path.display())));
            }
            Ok(Dataset { images, warnings })
        }
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// `[N, C, H, W]` of the selected images.
    pub fn stack(&self, indices: &[usize]) -> Array4<f32> {
        let views: Vec<_> = indices.iter().map(|&i| self.images[i].view()).collect();
        ndarray::stack(Axis(0), &views).expect("dataset images share a shape")
    }

    /// Endless shuffled batches; the order is a function of `seed` only.
    pub fn batches(&self, batch_size: usize, seed: u64) -> BatchIter<'_> {
        BatchIter { data: self, batch_size, rng: ChaCha8Rng::seed_from_u64(seed), order: Vec::new(), pos: 0 }
    }
}

pub struct BatchIter<'a> {
    data: &'a Dataset,
    batch_size: usize,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl BatchIter<'_> {
    /// Indices of the next batch; reshuffles at each epoch boundary.
    pub fn next_indices(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch_size);
        while out.len() < self.batch_size {
            if self.pos == self.order.len() {
                self.order = (0..self.data.len()).collect();
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

impl Iterator for BatchIter<'_> {
    type Item = Array4<f32>;

    fn next(&mut self) -> Option<Self::Item> {
        let idx = self.next_indices();
        Some(self.data.stack(&idx))
    }
}
