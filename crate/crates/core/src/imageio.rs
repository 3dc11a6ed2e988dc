//! 8-bit PNG exchange for `(1, 3, H, W)` unit-interval tensors.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub fn to_u8<T: Scalar>(v: T) -> u8 {
    let f = v.to_f64_lossy();
    if f.is_nan() {
        return 0;
    }
    (f.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn from_u8<T: Scalar>(v: u8) -> T {
    T::lit(v as f64 / 255.0)
}

/// Rounds every value onto the 8-bit grid `k / 255`, clamping to `[0, 1]`.
pub fn quantize<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    t.map(|v| from_u8(to_u8(v)))
}

pub fn from_rgb8<T: Scalar>(img: &RgbImage) -> Tensor<T> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Tensor::from_fn(&[1, 3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        from_u8(raw[p * 3 + c])
    })
}

/// Batch item 0 of a `(B, 3, H, W)` tensor as an 8-bit image.
pub fn to_rgb8<T: Scalar>(t: &Tensor<T>) -> Result<RgbImage> {
    let (_, c, h, w) = t.dims4()?;
    if c != 3 {
        return Err(Error::invalid(format!("expected 3 channels, got {c}")));
    }
    let (r, g, b) = (t.plane(0, 0), t.plane(0, 1), t.plane(0, 2));
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        Rgb([to_u8(r[p]), to_u8(g[p]), to_u8(b[p])])
    }))
}

pub fn load_rgb8(path: &Path) -> Result<RgbImage> {
    if !path.exists() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    Ok(image::open(path)?.to_rgb8())
}

pub fn load_rgb<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    Ok(from_rgb8(&load_rgb8(path)?))
}

pub fn save_rgb<T: Scalar>(t: &Tensor<T>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    to_rgb8(t)?.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Places images left to right on a white canvas with a 4-pixel gutter.
pub fn side_by_side(images: &[RgbImage]) -> RgbImage {
    const GUTTER: u32 = 4;
    let h = images.iter().map(|i| i.height()).max().unwrap_or(0);
    let w = images.iter().map(|i| i.width()).sum::<u32>() + GUTTER * images.len().saturating_sub(1) as u32;
    let mut canvas = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let mut x0 = 0;
    for img in images {
        image::imageops::replace(&mut canvas, img, x0 as i64, 0);
        x0 += img.width() + GUTTER;
    }
    canvas
}
