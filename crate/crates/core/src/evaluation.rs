//! Fidelity metrics: PSNR, SSIM, MAE and luma conversion.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Returned by [`psnr`] for identical images.
pub const PSNR_CAP: f64 = 100.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Full-range BT.601 luma weights for (r, g, b).
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricMode {
    /// Per-channel metrics averaged over RGB.
    #[default]
    Rgb,
    /// Metrics on the luma channel only.
    Luma,
}

fn mse<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    pred.check_same_shape(target)?;
    if pred.is_empty() {
        return Err(Error::invalid("empty images"));
    }
    let s: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| {
            let d = a.to_f64_lossy() - b.to_f64_lossy();
            d * d
        })
        .sum();
    Ok(s / pred.len() as f64)
}

pub fn psnr<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(Error::invalid(format!("peak must be positive, got {peak}")));
    }
    let m = mse(pred, target)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / m).log10()).min(PSNR_CAP))
}

pub fn mae<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    pred.check_same_shape(target)?;
    if pred.is_empty() {
        return Err(Error::invalid("empty images"));
    }
    let s: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a.to_f64_lossy() - b.to_f64_lossy()).abs())
        .sum();
    Ok(s / pred.len() as f64)
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let mid = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size).map(|i| (-(i as f64 - mid).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering of one plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM of two planes over all valid window positions, unit data range.
pub fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> Result<f64> {
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "{h}x{w} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let taps = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mu_a = filter_valid(a, h, w, &taps);
    let mu_b = filter_valid(b, h, w, &taps);
    let aa = filter_valid(&prod(a, a), h, w, &taps);
    let bb = filter_valid(&prod(b, b), h, w, &taps);
    let ab = filter_valid(&prod(a, b), h, w, &taps);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / n as f64)
}

/// SSIM of `(B, C, H, W)` tensors, averaged over every plane.
pub fn ssim<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    pred.check_same_shape(target)?;
    let (b, c, h, w) = pred.dims4()?;
    if b * c == 0 {
        return Err(Error::invalid("empty images"));
    }
    let as_f64 = |s: &[T]| s.iter().map(|v| v.to_f64_lossy()).collect::<Vec<_>>();
    let mut total = 0.0;
    for bi in 0..b {
        for ci in 0..c {
            total += ssim_plane(&as_f64(pred.plane(bi, ci)), &as_f64(target.plane(bi, ci)), h, w)?;
        }
    }
    Ok(total / (b * c) as f64)
}

/// `(B, 3, H, W)` to `(B, 1, H, W)` luma.
pub fn to_luma<T: Scalar>(image: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = image.dims4()?;
    if c != 3 {
        return Err(Error::invalid(format!("luma needs 3 channels, got {c}")));
    }
    let weights = LUMA_WEIGHTS.map(T::lit);
    let mut data = Vec::with_capacity(b * h * w);
    for bi in 0..b {
        let (r, g, bl) = (image.plane(bi, 0), image.plane(bi, 1), image.plane(bi, 2));
        data.extend((0..h * w).map(|p| weights[0] * r[p] + weights[1] * g[p] + weights[2] * bl[p]));
    }
    Tensor::from_vec(&[b, 1, h, w], data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
    pub mae: f64,
}

/// Metrics for one prediction/target pair under `mode`.
pub fn evaluate_pair<T: Scalar>(name: &str, pred: &Tensor<T>, target: &Tensor<T>, mode: MetricMode) -> Result<ImageMetrics> {
    let (p, t) = match mode {
        MetricMode::Rgb => (pred.clone(), target.clone()),
        MetricMode::Luma => (to_luma(pred)?, to_luma(target)?),
    };
    Ok(ImageMetrics {
        name: name.to_string(),
        psnr: psnr(&p, &t, 1.0)?,
        ssim: ssim(&p, &t)?,
        mae: mae(&p, &t)?,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mode: MetricMode,
    pub records: Vec<ImageMetrics>,
}

impl MetricReport {
    pub fn new(mode: MetricMode) -> Self {
        Self { mode, records: Vec::new() }
    }

    pub fn push(&mut self, m: ImageMetrics) {
        self.records.push(m);
    }

    /// Arithmetic means of (psnr, ssim, mae); `None` when empty.
    pub fn mean(&self) -> Option<(f64, f64, f64)> {
        if self.records.is_empty() {
            return None;
        }
        let n = self.records.len() as f64;
        let sum = self.records.iter().fold((0.0, 0.0, 0.0), |acc, r| (acc.0 + r.psnr, acc.1 + r.ssim, acc.2 + r.mae));
        Some((sum.0 / n, sum.1 / n, sum.2 / n))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("name,psnr,ssim,mae\n");
        for r in &self.records {
            let _ = writeln!(s, "{},{:.6},{:.6},{:.6}", r.name, r.psnr, r.ssim, r.mae);
        }
        s
    }

    /// `key = value` lines with the aggregate means.
    pub fn summary(&self) -> String {
        let mode = match self.mode {
            MetricMode::Rgb => "rgb",
            MetricMode::Luma => "luma",
        };
        let mut s = format!("mode = {mode}\nimages = {}\n", self.records.len());
        if let Some((p, ss, m)) = self.mean() {
            let _ = write!(s, "mean_psnr = {p:.6}\nmean_ssim = {ss:.6}\nmean_mae = {m:.6}\n");
        }
        s
    }
}
