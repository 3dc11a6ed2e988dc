//! Parser maps and the parser feature network.
//!
//! A parser map is a segmentation of the degraded image rendered as a
//! 3-channel picture. Maps come from disk (any offline segmenter) or from the
//! built-in k-means [`stub_parse`]. [`ParserNet`] turns a map into one feature
//! tensor per backbone level.

use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, NodeId};
use crate::backbone::{Downsample, ModelConfig};
use crate::error::{Error, Result};
use crate::imageio;
use crate::layers::{Conv1x1, Conv3x3, Depthwise3x3};
use crate::params::ParamBuilder;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Environment variable that overrides the parser cache root.
pub const CACHE_ENV: &str = "PPT_CACHE_DIR";

const KMEANS_ITERS: usize = 25;
/// Segments whose mean colors lie closer than this (Euclidean, unit RGB) are merged.
const MERGE_DISTANCE: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParserSource {
    Precomputed,
    Stub,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParserMap<T> {
    /// `(1, 3, H, W)` in `[0, 1]`.
    pub image: Tensor<T>,
    pub source: ParserSource,
}

/// Loads a parser rendering from disk, scaled to `[0, 1]`.
///
/// With `expected = Some((h, w))` a size mismatch is an error unless
/// `auto_resize` is set, in which case the map is nearest-neighbour resized.
pub fn load_parser<T: Scalar>(path: &Path, expected: Option<(usize, usize)>, auto_resize: bool) -> Result<ParserMap<T>> {
    let mut img = imageio::load_rgb8(path)?;
    if let Some((h, w)) = expected {
        if (img.height() as usize, img.width() as usize) != (h, w) {
            if !auto_resize {
                return Err(Error::invalid(format!(
                    "parser map {} is {}x{}, expected {h}x{w}",
                    path.display(),
                    img.height(),
                    img.width()
                )));
            }
            img = image::imageops::resize(&img, w as u32, h as u32, FilterType::Nearest);
        }
    }
    Ok(ParserMap { image: imageio::from_rgb8(&img), source: ParserSource::Precomputed })
}

/// `n` distinct 8-bit colors drawn from `seed`.
pub fn palette(n: usize, seed: u64) -> Vec<[u8; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<[u8; 3]> = Vec::with_capacity(n);
    while out.len() < n {
        let c = [rng.random(), rng.random(), rng.random()];
        if !out.contains(&c) {
            out.push(c);
        }
    }
    out
}

/// Per-pixel segment labels from k-means over `(r, g, b, x/W, y/H)`.
///
/// Initial centers are the pixels at the centers of a regular grid of cells,
/// thinned to `n_segments` by farthest-point selection. Labels are renumbered
/// in order of first appearance, after merging clusters of indistinguishable
/// mean color.
pub fn segment<T: Scalar>(image: &Tensor<T>, n_segments: usize) -> Result<Vec<usize>> {
    if n_segments == 0 {
        return Err(Error::invalid("n_segments must be at least 1"));
    }
    let (b, c, h, w) = image.dims4()?;
    if b != 1 || c != 3 {
        return Err(Error::invalid(format!("expected a (1, 3, H, W) image, got {:?}", image.shape())));
    }
    let n = h * w;
    let planes = [image.plane(0, 0), image.plane(0, 1), image.plane(0, 2)];
    let feature = |p: usize| -> [f64; 5] {
        [
            planes[0][p].to_f64_lossy(),
            planes[1][p].to_f64_lossy(),
            planes[2][p].to_f64_lossy(),
            (p % w) as f64 / w as f64,
            (p / w) as f64 / h as f64,
        ]
    };
    let feats: Vec<[f64; 5]> = (0..n).map(feature).collect();
    let dist = |a: &[f64; 5], b: &[f64; 5]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();

    let side = (n_segments as f64).sqrt().ceil() as usize * 2;
    let (gy, gx) = (side.min(h), side.min(w));
    let mut candidates = Vec::with_capacity(gy * gx);
    for j in 0..gy {
        for i in 0..gx {
            let y = (2 * j + 1) * h / (2 * gy);
            let x = (2 * i + 1) * w / (2 * gx);
            candidates.push(feats[y * w + x]);
        }
    }
    let mut centers = vec![candidates[0]];
    let mut nearest: Vec<f64> = candidates.iter().map(|f| dist(f, &centers[0])).collect();
    while centers.len() < n_segments.min(candidates.len()) {
        let (best, &d) = nearest
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .expect("non-empty candidates");
        if d == 0.0 {
            break;
        }
        let c = candidates[best];
        for (nd, f) in nearest.iter_mut().zip(&candidates) {
            *nd = nd.min(dist(f, &c));
        }
        centers.push(c);
    }

    let k = centers.len();
    let mut labels = vec![0usize; n];
    for _ in 0..KMEANS_ITERS {
        let mut changed = false;
        for (p, f) in feats.iter().enumerate() {
            let mut best = 0;
            let mut bd = f64::INFINITY;
            for (ci, c) in centers.iter().enumerate() {
                let d = dist(f, c);
                if d < bd {
                    bd = d;
                    best = ci;
                }
            }
            if labels[p] != best {
                labels[p] = best;
                changed = true;
            }
        }
        let mut sums = vec![[0.0f64; 5]; k];
        let mut counts = vec![0usize; k];
        for (f, &l) in feats.iter().zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(f) {
                *s += v;
            }
        }
        for ci in 0..k {
            if counts[ci] > 0 {
                centers[ci] = sums[ci].map(|s| s / counts[ci] as f64);
            }
        }
        if !changed {
            break;
        }
    }

    // Union clusters with indistinguishable mean colors.
    let mut root: Vec<usize> = (0..k).collect();
    let used: Vec<bool> = (0..k).map(|ci| labels.contains(&ci)).collect();
    for a in 0..k {
        for b in 0..a {
            if used[a] && used[b] && root[b] == b {
                let d = (0..3).map(|i| (centers[a][i] - centers[b][i]).powi(2)).sum::<f64>().sqrt();
                if d < MERGE_DISTANCE {
                    root[a] = b;
                    break;
                }
            }
        }
    }
    let mut renumber = vec![usize::MAX; k];
    let mut next = 0;
    for l in labels.iter_mut() {
        let r = root[*l];
        if renumber[r] == usize::MAX {
            renumber[r] = next;
            next += 1;
        }
        *l = renumber[r];
    }
    Ok(labels)
}

/// Built-in stand-in for an offline segmenter: k-means segments rendered as
/// seeded palette colors, quantized to 8 bits.
pub fn stub_parse<T: Scalar>(image: &Tensor<T>, n_segments: usize, seed: u64) -> Result<ParserMap<T>> {
    let labels = segment(image, n_segments)?;
    let (_, _, h, w) = image.dims4()?;
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let colors = palette(k, seed);
    let hw = h * w;
    let data = Tensor::from_fn(&[1, 3, h, w], |i| imageio::from_u8(colors[labels[i % hw]][i / hw]));
    Ok(ParserMap { image: data, source: ParserSource::Stub })
}

/// Parser cache root: `PPT_CACHE_DIR` if set, else `default`.
pub fn cache_root(default: &Path) -> PathBuf {
    std::env::var_os(CACHE_ENV).map(PathBuf::from).unwrap_or_else(|| default.to_path_buf())
}

/// `<cache_dir>/<split>/<stem>.png`.
pub fn cache_path(cache_dir: &Path, split: &str, source_image: &Path) -> PathBuf {
    let stem = source_image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    cache_dir.join(split).join(format!("{stem}.png"))
}

/// Depthwise then pointwise convolution with a residual: `x + pw(gelu(dw(x)))`.
#[derive(Clone, Debug)]
pub struct ResidualConvBlock {
    pub dw: Depthwise3x3,
    pub pw: Conv1x1,
}

impl ResidualConvBlock {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, width: usize) -> Result<Self> {
        Ok(Self {
            dw: Depthwise3x3::new(&mut pb.child("dw"), width, true)?,
            pw: Conv1x1::new(&mut pb.child("pw"), width, width, true)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: NodeId) -> Result<NodeId> {
        let h = self.dw.forward(g, x)?;
        let h = g.gelu(h);
        let h = self.pw.forward(g, h)?;
        g.add(x, h)
    }
}

/// Convolutional encoder emitting one parser feature per backbone level.
#[derive(Clone, Debug)]
pub struct ParserNet {
    pub stem: Conv3x3,
    pub stages: Vec<Vec<ResidualConvBlock>>,
    pub down: Vec<Downsample>,
    pub taps: Vec<Conv1x1>,
}

impl ParserNet {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, cfg: &ModelConfig) -> Result<Self> {
        let stem = Conv3x3::new(&mut pb.child("stem"), 3, cfg.base_channels, true)?;
        let mut stages = Vec::new();
        let mut down = Vec::new();
        let mut taps = Vec::new();
        for l in 0..cfg.levels {
            let w = cfg.level_width(l);
            stages.push(
                (0..cfg.parser_stage_blocks)
                    .map(|j| ResidualConvBlock::new(&mut pb.child("stage").child(l).child(j), w))
                    .collect::<Result<Vec<_>>>()?,
            );
            taps.push(Conv1x1::new(&mut pb.child("tap").child(l), w, w, true)?);
            if l + 1 < cfg.levels {
                down.push(Downsample::new(&mut pb.child("down").child(l), w)?);
            }
        }
        Ok(Self { stem, stages, down, taps })
    }

    /// Pyramid for a `(B, 3, H, W)` parser map; entry `l` is `(B, C 2^l, H / 2^l, W / 2^l)`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, m: NodeId) -> Result<Vec<NodeId>> {
        let mut h = self.stem.forward(g, m)?;
        let mut pyramid = Vec::with_capacity(self.taps.len());
        for (l, stage) in self.stages.iter().enumerate() {
            for block in stage {
                h = block.forward(g, h)?;
            }
            pyramid.push(self.taps[l].forward(g, h)?);
            if l < self.down.len() {
                h = self.down[l].forward(g, h)?;
            }
        }
        Ok(pyramid)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn halves(h: usize, w: usize, vertical: bool) -> Tensor<f64> {
        Tensor::from_fn(&[1, 3, h, w], |i| {
            let p = i % (h * w);
            let side = if vertical { p % w >= w / 2 } else { p / w >= h / 2 };
            if side { 0.9 } else { 0.1 }
        })
    }

    #[test]
    fn palette_is_distinct_and_seeded() {
        let a = palette(50, 7);
        assert_eq!(a, palette(50, 7));
        assert_ne!(a, palette(50, 8));
        for i in 0..a.len() {
            for j in 0..i {
                assert_ne!(a[i], a[j]);
            }
        }
    }

    #[test]
    fn half_planes_split_on_boundary() {
        for vertical in [true, false] {
            let img = halves(12, 10, vertical);
            let labels = segment(&img, 2).unwrap();
            for (p, &l) in labels.iter().enumerate() {
                let side = if vertical { p % 10 >= 5 } else { p / 10 >= 6 };
                assert_eq!(l == labels[0], !side, "pixel {p}");
            }
        }
    }

    #[test]
    fn constant_image_is_one_segment() {
        let img = Tensor::<f32>::full(&[1, 3, 9, 9], 0.4);
        for n in [1, 2, 5, 16] {
            assert!(segment(&img, n).unwrap().iter().all(|&l| l == 0));
        }
    }

    #[test]
    fn zero_segments_rejected() {
        assert!(stub_parse(&Tensor::<f32>::zeros(&[1, 3, 4, 4]), 0, 0).is_err());
    }

    #[test]
    fn cache_path_layout() {
        let p = cache_path(Path::new("/c"), "train", Path::new("/data/x/img_003.png"));
        assert_eq!(p, Path::new("/c/train/img_003.png"));
    }
}
