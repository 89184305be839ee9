//! 8-bit PNG codec. Pixel values map as `v = p / 127.5 − 1` on load and
//! `p = round((v + 1) · 127.5)` on save, clamped to `[0, 255]`.

use std::path::Path;

use image::DynamicImage;
use ndarray::{Array2, Array3};

use crate::error::{HarnessError, Result};

pub const VALUE_MAPPING: &str = "png u8 p <-> v = p / 127.5 - 1, v in [-1, 1]";

pub fn to_unit(p: u8) -> f32 {
    p as f32 / 127.5 - 1.0
}

pub fn to_byte(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Converts a decoded image to `[channels, size, size]`, resizing if needed.
pub fn from_dynamic(img: DynamicImage, channels: usize, size: usize) -> Result<Array3<f32>> {
    let img = if img.width() as usize != size || img.height() as usize != size {
        img.resize_exact(size as u32, size as u32, image::imageops::FilterType::Triangle)
    } else {
        img
    };
    match channels {
        1 => {
            let g = img.to_luma8();
            Ok(Array3::from_shape_fn((1, size, size), |(_, y, x)| to_unit(g.get_pixel(x as u32, y as u32).0[0])))
        }
        3 => {
            let c = img.to_rgb8();
            Ok(Array3::from_shape_fn((3, size, size), |(ch, y, x)| to_unit(c.get_pixel(x as u32, y as u32).0[ch])))
        }
        n => Err(HarnessError::Config(format!("images need 1 or 3 channels, got {n}"))),
    }
}

pub fn load_png(path: &Path, channels: usize, size: usize) -> Result<Array3<f32>> {
    let img = image::open(path).map_err(|e| HarnessError::Image { path: path.into(), reason: e.to_string() })?;
    from_dynamic(img, channels, size)
}

/// Mask file: nonzero luma = known.
pub fn load_mask(path: &Path, size: usize) -> Result<Array2<bool>> {
    let img = image::open(path).map_err(|e| HarnessError::Image { path: path.into(), reason: e.to_string() })?;
    let g = img.resize_exact(size as u32, size as u32, image::imageops::FilterType::Nearest).to_luma8();
    Ok(Array2::from_shape_fn((size, size), |(y, x)| g.get_pixel(x as u32, y as u32).0[0] != 0))
}

/// tEXt keyword under which written images carry the run's config hash.
pub const HASH_KEYWORD: &str = "conprediff-config-hash";

/// PNG bytes of one `[C, H, W]` image, optionally tagged with a config hash.
pub fn png_bytes(img: &Array3<f32>, config_hash: Option<&str>) -> Result<Vec<u8>> {
    let (c, h, w) = img.dim();
    let color = match c {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        n => return Err(HarnessError::Config(format!("cannot encode {n}-channel image"))),
    };
    let mut data = Vec::with_capacity(c * h * w);
    for y in 0..h {
        for x in 0..w {
            data.extend((0..c).map(|ch| to_byte(img[[ch, y, x]])));
        }
    }
    let fail = |e: &dyn std::fmt::Display| HarnessError::Image { path: "<memory>".into(), reason: e.to_string() };
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        if let Some(hash) = config_hash {
            enc.add_text_chunk(HASH_KEYWORD.into(), hash.into()).map_err(|e| fail(&e))?;
        }
        let mut writer = enc.write_header().map_err(|e| fail(&e))?;
        writer.write_image_data(&data).map_err(|e| fail(&e))?;
    }
    Ok(out)
}

pub fn save_png(path: &Path, img: &Array3<f32>, config_hash: Option<&str>) -> Result<()> {
    let bytes = png_bytes(img, config_hash)?;
    std::fs::write(path, bytes).map_err(|e| HarnessError::io(path, e))
}

/// Config hash embedded by [`save_png`], if any.
pub fn read_png_hash(path: &Path) -> Result<Option<String>> {
    let file = std::fs::File::open(path).map_err(|e| HarnessError::io(path, e))?;
    let reader = png::Decoder::new(std::io::BufReader::new(file))
        .read_info()
        .map_err(|e| HarnessError::Image { path: path.into(), reason: e.to_string() })?;
    Ok(reader
        .info()
        .uncompressed_latin1_text
        .iter()
        .find(|t| t.keyword == HASH_KEYWORD)
        .map(|t| t.text.clone()))
}

/// Tiles equally sized images row-major into one image, `cols` per row.
pub fn grid(images: &[Array3<f32>], cols: usize) -> Result<Array3<f32>> {
    let first = images.first().ok_or_else(|| HarnessError::Config("empty image grid".into()))?;
    let (c, h, w) = first.dim();
    let cols = cols.clamp(1, images.len());
    let rows = images.len().div_ceil(cols);
    let mut out = Array3::from_elem((c, rows * h, cols * w), -1.0f32);
    for (i, img) in images.iter().enumerate() {
        if img.dim() != (c, h, w) {
            return Err(HarnessError::Config("grid images differ in shape".into()));
        }
        let (r, q) = (i / cols, i % cols);
        out.slice_mut(ndarray::s![.., r * h..(r + 1) * h, q * w..(q + 1) * w]).assign(img);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_mapping_round_trips() {
        for p in 0..=255u8 {
            assert_eq!(to_byte(to_unit(p)), p);
        }
        assert_eq!(to_byte(3.0), 255);
        assert_eq!(to_byte(-3.0), 0);
    }

    #[test]
    fn png_round_trip_is_exact_on_the_byte_grid() {
        let dir = tempfile::tempdir().unwrap();
        let img = Array3::from_shape_fn((3, 5, 5), |(c, y, x)| to_unit((c * 60 + y * 11 + x * 7) as u8));
        let path = dir.path().join("a.png");
        save_png(&path, &img, Some("abc")).unwrap();
        assert_eq!(read_png_hash(&path).unwrap().as_deref(), Some("abc"));
        assert_eq!(load_png(&path, 3, 5).unwrap(), img);
        assert_eq!(load_png(&path, 3, 10).unwrap().dim(), (3, 10, 10));
        let gray = Array3::from_shape_fn((1, 6, 6), |(_, y, x)| to_unit((y * 40 + x) as u8));
        save_png(&path, &gray, None).unwrap();
        assert_eq!(read_png_hash(&path).unwrap(), None);
        assert_eq!(load_png(&path, 1, 6).unwrap(), gray);
    }

    #[test]
    fn grid_places_tiles() {
        let a = Array3::from_elem((1, 2, 2), 0.5f32);
        let b = Array3::from_elem((1, 2, 2), -0.5f32);
        let g = grid(&[a, b.clone(), b], 2).unwrap();
        assert_eq!(g.dim(), (1, 4, 4));
        assert_eq!(g[[0, 0, 0]], 0.5);
        assert_eq!(g[[0, 0, 3]], -0.5);
        assert_eq!(g[[0, 3, 3]], -1.0);
    }
}
