//! Procedural clean images and seeded synthetic degradations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parser::stub_parse;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Segment count used when stub-parsing synthetic degraded images.
pub const STUB_SEGMENTS: usize = 8;
pub const LOW_LIGHT_NOISE: f64 = 0.01;
pub const LOW_LIGHT_GAMMA: (f64, f64) = (2.0, 4.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Degradation {
    RainStreaks,
    LowLight,
}

impl std::str::FromStr for Degradation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rain_streaks" => Ok(Self::RainStreaks),
            "low_light" => Ok(Self::LowLight),
            _ => Err(Error::invalid(format!("unknown degradation {s:?} (rain_streaks, low_light)"))),
        }
    }
}

/// A (degraded, clean, parser map) triple; images are `(1, 3, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RestorationSample<T> {
    pub name: String,
    pub degraded: Tensor<T>,
    pub clean: Tensor<T>,
    pub parser: Option<Tensor<T>>,
}

/// Gradient background, a few flat shapes and one sinusoidal texture patch.
pub fn procedural_image<T: Scalar>(h: usize, w: usize, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let color = |rng: &mut ChaCha8Rng| [0; 3].map(|_: i32| rng.random_range(0.15..0.95));
    let c0 = color(&mut rng);
    let c1 = color(&mut rng);
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let mut px = vec![[0.0f64; 3]; h * w];
    for y in 0..h {
        for x in 0..w {
            let t = 0.5 + 0.5 * (dx * (x as f64 / w as f64 - 0.5) + dy * (y as f64 / h as f64 - 0.5));
            px[y * w + x] = [0, 1, 2].map(|c| c0[c] * (1.0 - t) + c1[c] * t);
        }
    }
    let shapes = rng.random_range(3..=6);
    for s in 0..shapes {
        let col = color(&mut rng);
        let cx = rng.random_range(0.0..w as f64);
        let cy = rng.random_range(0.0..h as f64);
        let rx = rng.random_range(0.08..0.3) * w as f64;
        let ry = rng.random_range(0.08..0.3) * h as f64;
        let circle = rng.random_bool(0.5);
        let textured = s == 0;
        let freq: f64 = rng.random_range(0.3..1.2);
        for y in 0..h {
            for x in 0..w {
                let (ux, uy) = ((x as f64 - cx) / rx, (y as f64 - cy) / ry);
                let inside = if circle { ux * ux + uy * uy <= 1.0 } else { ux.abs() <= 1.0 && uy.abs() <= 1.0 };
                if inside {
                    let mod_ = if textured { 0.1 * (freq * (x as f64 + y as f64)).sin() } else { 0.0 };
                    px[y * w + x] = col.map(|v| (v + mod_).clamp(0.0, 1.0));
                }
            }
        }
    }
    let hw = h * w;
    Tensor::from_fn(&[1, 3, h, w], |i| T::lit(px[i % hw][i / hw]))
}

/// `clamp(clean^gamma + N(0, sigma))`.
pub fn low_light<T: Scalar>(clean: &Tensor<T>, gamma: f64, sigma: f64, rng: &mut ChaCha8Rng) -> Result<Tensor<T>> {
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let g = T::lit(gamma);
    let out = clean.map(|v| v.max(T::zero()).powf(g));
    if sigma == 0.0 {
        return Ok(out);
    }
    let data = out
        .data()
        .iter()
        .map(|&v| (v + T::lit(noise.sample(rng))).max(T::zero()).min(T::one()))
        .collect();
    Tensor::from_vec(out.shape(), data)
}

/// Adds `n_streaks` bright one-pixel line segments sharing a dominant orientation.
pub fn rain_streaks<T: Scalar>(clean: &Tensor<T>, n_streaks: usize, rng: &mut ChaCha8Rng) -> Result<Tensor<T>> {
    let (_, _, h, w) = clean.dims4()?;
    let mut out = clean.clone();
    if n_streaks == 0 {
        return Ok(out);
    }
    let base: f64 = rng.random_range(-0.5..0.5);
    let long = h.max(w) as f64;
    let mut mask = vec![0.0f64; h * w];
    for _ in 0..n_streaks {
        let theta = base + rng.random_range(-0.08..0.08);
        let (sx, sy) = (theta.sin(), theta.cos());
        let len = rng.random_range(0.06..0.2) * long;
        let x0 = rng.random_range(0.0..w as f64);
        let y0 = rng.random_range(0.0..h as f64);
        let intensity = rng.random_range(0.2..0.5);
        let steps = len.ceil() as usize;
        for s in 0..=steps {
            let t = s as f64 - len / 2.0;
            let (x, y) = ((x0 + t * sx).round(), (y0 + t * sy).round());
            if x >= 0.0 && y >= 0.0 && (x as usize) < w && (y as usize) < h {
                let p = y as usize * w + x as usize;
                mask[p] = f64::max(mask[p], intensity);
            }
        }
    }
    let hw = h * w;
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let add = mask[i % hw];
        if add > 0.0 {
            *v = (*v + T::lit(add)).min(T::one());
        }
    }
    Ok(out)
}

/// Degrades `clean` deterministically from `seed` and stub-parses the result.
pub fn make_synthetic_pair<T: Scalar>(
    name: &str,
    clean: &Tensor<T>,
    degradation: Degradation,
    seed: u64,
) -> Result<RestorationSample<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let degraded = match degradation {
        Degradation::LowLight => {
            let gamma = rng.random_range(LOW_LIGHT_GAMMA.0..LOW_LIGHT_GAMMA.1);
            low_light(clean, gamma, LOW_LIGHT_NOISE, &mut rng)?
        }
        Degradation::RainStreaks => {
            let (_, _, h, w) = clean.dims4()?;
            let n = (h * w / 64).max(4);
            let n = rng.random_range(n / 2..=n);
            rain_streaks(clean, n, &mut rng)?
        }
    };
    let parser = stub_parse(&degraded, STUB_SEGMENTS, seed)?.image;
    Ok(RestorationSample { name: name.to_string(), degraded, clean: clean.clone(), parser: Some(parser) })
}

/// `n` procedural `size`x`size` pairs; image `i` uses seeds derived from `(seed, i)`.
pub fn synthetic_set<T: Scalar>(
    n: usize,
    size: usize,
    degradation: Degradation,
    seed: u64,
) -> Result<Vec<RestorationSample<T>>> {
    (0..n)
        .map(|i| {
            let s = seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
            let clean = procedural_image(size, size, s);
            make_synthetic_pair(&format!("{i:04}"), &clean, degradation, s ^ 0x5eed)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn low_light_gamma_two_without_noise() {
        let clean = Tensor::<f64>::full(&[1, 3, 4, 4], 0.81);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = low_light(&clean, 2.0, 0.0, &mut rng).unwrap();
        assert!(d.data().iter().all(|&v| (v - 0.6561).abs() < 1e-15));
    }

    #[test]
    fn zero_streaks_is_identity() {
        let clean = procedural_image::<f32>(16, 16, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(rain_streaks(&clean, 0, &mut rng).unwrap(), clean);
    }

    #[test]
    fn streaks_only_brighten() {
        let clean = procedural_image::<f32>(32, 32, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = rain_streaks(&clean, 20, &mut rng).unwrap();
        assert!(d.data().iter().zip(clean.data()).all(|(a, b)| a >= b));
        assert!(d.data().iter().zip(clean.data()).any(|(a, b)| a > b));
    }

    #[test]
    fn pairs_are_deterministic() {
        let clean = procedural_image::<f32>(24, 24, 9);
        for deg in [Degradation::LowLight, Degradation::RainStreaks] {
            let a = make_synthetic_pair("x", &clean, deg, 5).unwrap();
            let b = make_synthetic_pair("x", &clean, deg, 5).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn procedural_images_in_unit_range_and_seeded() {
        let a = procedural_image::<f64>(20, 30, 1);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(a, procedural_image(20, 30, 1));
        assert_ne!(a, procedural_image(20, 30, 2));
    }
}
