//! Color-palette tokenizer: k-means over training pixels, nearest-entry
//! assignment, palette lookup back to pixels.

use conprediff_core::TokenMap;
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Palette {
    pub channels: usize,
    /// `K` rows of `channels` values.
    pub colors: Vec<Vec<f32>>,
    /// Set when the data had fewer distinct colors than `K`.
    #[serde(default)]
    pub warning: Option<String>,
}

fn dist2(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl Palette {
    /// Fits `k` colors to (at most `max_pixels` randomly chosen) pixels of `images`.
    pub fn fit(images: &[Array3<f32>], k: usize, iterations: usize, max_pixels: usize, seed: u64) -> Result<Self> {
        if k < 2 {
            return Err(HarnessError::Config(format!("palette needs K >= 2, got {k}")));
        }
        let first = images.first().ok_or_else(|| HarnessError::Dataset("no images to fit a palette".into()))?;
        let c = first.dim().0;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let total: usize = images.iter().map(|i| i.dim().1 * i.dim().2).sum();
        let pixel = |n: usize| -> Vec<f32> {
            let mut n = n;
            for img in images {
                let (_, h, w) = img.dim();
                if n < h * w {
                    return (0..c).map(|ch| img[[ch, n / w, n % w]]).collect();
                }
                n -= h * w;
            }
            unreachable!("pixel index within total")
        };
        let pts: Vec<Vec<f32>> = if total <= max_pixels {
            (0..total).map(pixel).collect()
        } else {
            (0..max_pixels).map(|_| pixel(rng.random_range(0..total))).collect()
        };

        // k-means++ seeding
        let mut centers = vec![pts[rng.random_range(0..pts.len())].clone()];
        let mut d2: Vec<f32> = pts.iter().map(|p| dist2(p, &centers[0])).collect();
        let mut merged = 0;
        while centers.len() < k {
            let sum: f64 = d2.iter().map(|&v| v as f64).sum();
            if sum <= 0.0 {
                merged = k - centers.len();
                let dup = centers[0].clone();
                centers.resize(k, dup);
                break;
            }
            let mut u = rng.random::<f64>() * sum;
            let mut pick = pts.len() - 1;
            for (i, &v) in d2.iter().enumerate() {
                u -= v as f64;
                if u <= 0.0 && v > 0.0 {
                    pick = i;
                    break;
                }
            }
            centers.push(pts[pick].clone());
            let last = centers.last().expect("just pushed");
            for (d, p) in d2.iter_mut().zip(&pts) {
                *d = d.min(dist2(p, last));
            }
        }

        let live = k - merged;
        for _ in 0..iterations {
            let mut sums = vec![vec![0.0f64; c]; live];
            let mut counts = vec![0usize; live];
            for p in &pts {
                let j = nearest(&centers[..live], p);
                counts[j] += 1;
                for (s, &v) in sums[j].iter_mut().zip(p) {
                    *s += v as f64;
                }
            }
            let mut moved = false;
            for j in 0..live {
                if counts[j] == 0 {
                    continue;
                }
                let next: Vec<f32> = sums[j].iter().map(|s| (s / counts[j] as f64) as f32).collect();
                moved |= next != centers[j];
                centers[j] = next;
            }
            if !moved {
                break;
            }
        }
        let warning = (merged > 0).then(|| {
            let msg = format!("K = {k} exceeds the {live} distinct colors; {merged} palette entries merged");
            log::warn!("{msg}");
            msg
        });
        Ok(Self { channels: c, colors: centers, warning })
    }

    pub fn len(&self) -> usize {
        self.colors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.colors.is_empty()
    }

    pub fn quantize(&self, image: &Array3<f32>) -> Result<TokenMap> {
        let (c, h, w) = image.dim();
        if c != self.channels {
            return Err(HarnessError::Config(format!("{c}-channel image for a {}-channel palette", self.channels)));
        }
        let mut px = vec![0.0f32; c];
        let tokens = (0..h * w)
            .map(|i| {
                for (ch, v) in px.iter_mut().enumerate() {
                    *v = image[[ch, i / w, i % w]];
                }
                nearest(&self.colors, &px)
            })
            .collect();
        Ok(TokenMap::new(h, w, tokens)?)
    }

    pub fn detokenize(&self, map: &TokenMap) -> Result<Array3<f32>> {
        map.validate(self.len(), false)?;
        Ok(Array3::from_shape_fn((self.channels, map.height, map.width), |(ch, y, x)| {
            self.colors[map.get(y, x)][ch]
        }))
    }
}

/// Index of the closest color; ties go to the lowest index.
fn nearest(colors: &[Vec<f32>], p: &[f32]) -> usize {
    let mut best = (f32::INFINITY, 0);
    for (j, c) in colors.iter().enumerate() {
        let d = dist2(c, p);
        if d < best.0 {
            best = (d, j);
        }
    }
    best.1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{load_dataset, DatasetSpec};

    #[test]
    fn binary_images_use_two_tokens() {
        let img = Array3::from_shape_fn((1, 4, 4), |(_, y, x)| if (x + y) % 2 == 0 { 1.0 } else { -1.0 });
        let p = Palette::fit(std::slice::from_ref(&img), 2, 10, 1000, 0).unwrap();
        assert!(p.warning.is_none());
        let map = p.quantize(&img).unwrap();
        let mut used: Vec<_> = map.tokens.clone();
        used.sort();
        used.dedup();
        assert_eq!(used.len(), 2);
        let back = p.detokenize(&map).unwrap();
        assert!(back.iter().zip(&img).all(|(a, b)| (a - b).abs() < 1e-6));
    }

    #[test]
    fn constant_image_uses_one_token_and_warns() {
        let img = Array3::from_elem((3, 4, 4), 0.25f32);
        let p = Palette::fit(std::slice::from_ref(&img), 4, 10, 1000, 0).unwrap();
        assert!(p.warning.is_some());
        assert_eq!(p.len(), 4);
        let map = p.quantize(&img).unwrap();
        assert!(map.tokens.iter().all(|&t| t == map.tokens[0]));
    }

    #[test]
    fn round_trip_is_idempotent() {
        let d = load_dataset(&DatasetSpec::Blobs { count: 100, size: 8, channels: 3, seed: 5 }).unwrap();
        let p = Palette::fit(&d.images, 8, 20, 5000, 1).unwrap();
        for img in &d.images {
            let once = p.detokenize(&p.quantize(img).unwrap()).unwrap();
            let twice = p.detokenize(&p.quantize(&once).unwrap()).unwrap();
            assert_eq!(once, twice);
        }
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        let img = Array3::from_elem((1, 2, 2), 0.0f32);
        assert!(Palette::fit(std::slice::from_ref(&img), 1, 5, 10, 0).is_err());
        assert!(Palette::fit(&[], 2, 5, 10, 0).is_err());
        let p = Palette::fit(std::slice::from_ref(&img), 2, 5, 10, 0).unwrap();
        assert!(p.quantize(&Array3::zeros((3, 2, 2))).is_err());
    }
}
