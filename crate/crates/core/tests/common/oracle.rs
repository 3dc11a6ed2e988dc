//! Naive reference implementations written with explicit index loops.
//! They share no code with the library beyond the `Tensor` container.

#![allow(dead_code)]

use pptformer::params::ParamStore;
use pptformer::Tensor;

#[derive(Clone, Debug)]
pub struct Arr {
    pub b: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub d: Vec<f64>,
}

impl Arr {
    pub fn zeros(b: usize, c: usize, h: usize, w: usize) -> Self {
        Self { b, c, h, w, d: vec![0.0; b * c * h * w] }
    }

    pub fn from_tensor(t: &Tensor<f64>) -> Self {
        let s = t.shape();
        Self { b: s[0], c: s[1], h: s[2], w: s[3], d: t.data().to_vec() }
    }

    pub fn to_tensor(&self) -> Tensor<f64> {
        Tensor::from_vec(&[self.b, self.c, self.h, self.w], self.d.clone()).unwrap()
    }

    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> f64 {
        self.d[((b * self.c + c) * self.h + y) * self.w + x]
    }

    pub fn set(&mut self, b: usize, c: usize, y: usize, x: usize, v: f64) {
        let (cc, h, w) = (self.c, self.h, self.w);
        self.d[((b * cc + c) * h + y) * w + x] = v;
    }

    /// Zero outside the image.
    pub fn at_padded(&self, b: usize, c: usize, y: isize, x: isize) -> f64 {
        if y < 0 || x < 0 || y >= self.h as isize || x >= self.w as isize {
            0.0
        } else {
            self.at(b, c, y as usize, x as usize)
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { d: self.d.iter().map(|&v| f(v)).collect(), ..self.clone() }
    }

    pub fn zip(&self, o: &Arr, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!((self.b, self.c, self.h, self.w), (o.b, o.c, o.h, o.w));
        Self { d: self.d.iter().zip(&o.d).map(|(&a, &b)| f(a, b)).collect(), ..self.clone() }
    }

    pub fn add(&self, o: &Arr) -> Self {
        self.zip(o, |a, b| a + b)
    }

    pub fn mul(&self, o: &Arr) -> Self {
        self.zip(o, |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    /// Channels `[start, start + len)`.
    pub fn channels(&self, start: usize, len: usize) -> Self {
        let mut out = Arr::zeros(self.b, len, self.h, self.w);
        for b in 0..self.b {
            for c in 0..len {
                for y in 0..self.h {
                    for x in 0..self.w {
                        out.set(b, c, y, x, self.at(b, start + c, y, x));
                    }
                }
            }
        }
        out
    }

    pub fn cat(parts: &[&Arr]) -> Self {
        let c: usize = parts.iter().map(|p| p.c).sum();
        let f = parts[0];
        let mut out = Arr::zeros(f.b, c, f.h, f.w);
        for b in 0..f.b {
            let mut off = 0;
            for p in parts {
                for ci in 0..p.c {
                    for y in 0..f.h {
                        for x in 0..f.w {
                            out.set(b, off + ci, y, x, p.at(b, ci, y, x));
                        }
                    }
                }
                off += p.c;
            }
        }
        out
    }

    pub fn max_abs_diff(&self, t: &Tensor<f64>) -> f64 {
        assert_eq!(t.shape(), &[self.b, self.c, self.h, self.w]);
        self.d.iter().zip(t.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

pub fn param(store: &ParamStore<f64>, name: &str) -> Vec<f64> {
    let name = name.trim_start_matches('.');
    store.by_name(name).unwrap_or_else(|| panic!("no parameter {name}")).data().to_vec()
}

pub fn opt_param(store: &ParamStore<f64>, name: &str) -> Option<Vec<f64>> {
    store.by_name(name.trim_start_matches('.')).map(|t| t.data().to_vec())
}

/// `out[o] = sum_i w[o, i] x[i] + b[o]`.
pub fn conv1x1(x: &Arr, w: &[f64], b: Option<&[f64]>, c_out: usize) -> Arr {
    let mut out = Arr::zeros(x.b, c_out, x.h, x.w);
    for n in 0..x.b {
        for o in 0..c_out {
            for y in 0..x.h {
                for xx in 0..x.w {
                    let mut s = b.map_or(0.0, |b| b[o]);
                    for i in 0..x.c {
                        s += w[o * x.c + i] * x.at(n, i, y, xx);
                    }
                    out.set(n, o, y, xx, s);
                }
            }
        }
    }
    out
}

/// Cross-correlation with a 3x3 kernel and one pixel of zero padding.
pub fn conv3x3(x: &Arr, w: &[f64], b: Option<&[f64]>, c_out: usize) -> Arr {
    let mut out = Arr::zeros(x.b, c_out, x.h, x.w);
    for n in 0..x.b {
        for o in 0..c_out {
            for y in 0..x.h {
                for xx in 0..x.w {
                    let mut s = b.map_or(0.0, |b| b[o]);
                    for i in 0..x.c {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let v = x.at_padded(n, i, y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                                s += w[((o * x.c + i) * 3 + ky) * 3 + kx] * v;
                            }
                        }
                    }
                    out.set(n, o, y, xx, s);
                }
            }
        }
    }
    out
}

pub fn depthwise3x3(x: &Arr, w: &[f64], b: Option<&[f64]>) -> Arr {
    let mut out = Arr::zeros(x.b, x.c, x.h, x.w);
    for n in 0..x.b {
        for c in 0..x.c {
            for y in 0..x.h {
                for xx in 0..x.w {
                    let mut s = b.map_or(0.0, |b| b[c]);
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let v = x.at_padded(n, c, y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                            s += w[c * 9 + ky * 3 + kx] * v;
                        }
                    }
                    out.set(n, c, y, xx, s);
                }
            }
        }
    }
    out
}

/// Layer norm over channels at each pixel, biased variance, eps 1e-5.
pub fn layer_norm(x: &Arr, w: &[f64], b: &[f64]) -> Arr {
    let mut out = x.clone();
    for n in 0..x.b {
        for y in 0..x.h {
            for xx in 0..x.w {
                let vals: Vec<f64> = (0..x.c).map(|c| x.at(n, c, y, xx)).collect();
                let mean = vals.iter().sum::<f64>() / x.c as f64;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / x.c as f64;
                for c in 0..x.c {
                    out.set(n, c, y, xx, (vals[c] - mean) / (var + 1e-5).sqrt() * w[c] + b[c]);
                }
            }
        }
    }
    out
}

pub fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + libm::erf(v / std::f64::consts::SQRT_2))
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Dense `C x C` attention matrices per (batch, head), materialized explicitly.
pub fn attention_matrix(q: &Arr, k: &Arr, alpha: &[f64], heads: usize, normalize: bool) -> Vec<Vec<Vec<f64>>> {
    let cph = q.c / heads;
    let hw = q.h * q.w;
    let row = |a: &Arr, n: usize, c: usize| -> Vec<f64> {
        let r: Vec<f64> = (0..hw).map(|p| a.at(n, c, p / a.w, p % a.w)).collect();
        if normalize {
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            r.iter().map(|v| v / norm).collect()
        } else {
            r
        }
    };
    let mut mats = Vec::new();
    for n in 0..q.b {
        for hd in 0..heads {
            let mut m = vec![vec![0.0; cph]; cph];
            for i in 0..cph {
                let qi = row(q, n, hd * cph + i);
                for j in 0..cph {
                    let kj = row(k, n, hd * cph + j);
                    m[i][j] = qi.iter().zip(&kj).map(|(a, b)| a * b).sum::<f64>() / alpha[hd];
                }
                let mx = m[i].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = m[i].iter().map(|v| (v - mx).exp()).collect();
                let s: f64 = e.iter().sum();
                m[i] = e.iter().map(|v| v / s).collect();
            }
            mats.push(m);
        }
    }
    mats
}

pub fn channel_attention(q: &Arr, k: &Arr, v: &Arr, alpha: &[f64], heads: usize, normalize: bool) -> Arr {
    let mats = attention_matrix(q, k, alpha, heads, normalize);
    let cph = q.c / heads;
    let mut out = Arr::zeros(v.b, v.c, v.h, v.w);
    for n in 0..q.b {
        for hd in 0..heads {
            let a = &mats[n * heads + hd];
            for i in 0..cph {
                for y in 0..v.h {
                    for x in 0..v.w {
                        let s: f64 = (0..cph).map(|j| a[i][j] * v.at(n, hd * cph + j, y, x)).sum();
                        out.set(n, hd * cph + i, y, x, s);
                    }
                }
            }
        }
    }
    out
}

fn pw(store: &ParamStore<f64>, path: &str, x: &Arr) -> Arr {
    let w = param(store, &format!("{path}.weight"));
    let b = opt_param(store, &format!("{path}.bias"));
    let c_out = w.len() / x.c;
    conv1x1(x, &w, b.as_deref(), c_out)
}

fn dw(store: &ParamStore<f64>, path: &str, x: &Arr) -> Arr {
    let w = param(store, &format!("{path}.weight"));
    let b = opt_param(store, &format!("{path}.bias"));
    depthwise3x3(x, &w, b.as_deref())
}

/// The fusion block written out line by line from its defining equations.
pub fn bippf(store: &ParamStore<f64>, p: &str, x: &Arr, m: &Arr) -> Arr {
    let x_hat = pw(store, &format!("{p}.x_proj"), x);
    let m_hat = pw(store, &format!("{p}.m_proj"), m);
    let fusion = pw(store, &format!("{p}.fuse_proj"), &Arr::cat(&[&x_hat, &m_hat]));
    let x_tilde = fusion.mul(&x_hat).add(&x_hat);
    let m_tilde = fusion.mul(&m_hat).add(&m_hat);
    pw(store, &format!("{p}.out_proj"), &Arr::cat(&[&x_tilde, &m_tilde])).add(x)
}

/// Gated feed-forward with the first branch fused with the parser.
pub fn ppfn(store: &ParamStore<f64>, p: &str, x: &Arr, m: &Arr, fused: bool) -> Arr {
    let e = dw(store, &format!("{p}.dw"), &pw(store, &format!("{p}.expand"), x));
    let half = e.c / 2;
    let x1 = e.channels(0, half);
    let x2 = e.channels(half, half);
    let f = if fused { bippf(store, &format!("{p}.fusion"), &x1, m) } else { x1 };
    pw(store, &format!("{p}.project"), &f.mul(&x2.map(gelu))).add(x)
}

/// Query from `x`; keys and values are 1x1 merges of parser and restoration projections.
pub fn intra_ppa(store: &ParamStore<f64>, p: &str, x: &Arr, m: &Arr, heads: usize) -> Arr {
    let c = x.c;
    let kv_m = dw(store, &format!("{p}.parser_kv_dw"), &pw(store, &format!("{p}.parser_kv_pw"), m));
    let (k_m, v_m) = (kv_m.channels(0, c), kv_m.channels(c, c));
    let qkv = dw(store, &format!("{p}.qkv_dw"), &pw(store, &format!("{p}.qkv_pw"), x));
    let (q, k_r, v_r) = (qkv.channels(0, c), qkv.channels(c, c), qkv.channels(2 * c, c));
    let k = pw(store, &format!("{p}.key_merge"), &Arr::cat(&[&k_m, &k_r]));
    let v = pw(store, &format!("{p}.value_merge"), &Arr::cat(&[&v_m, &v_r]));
    let alpha = param(store, &format!("{p}.alpha"));
    channel_attention(&q, &k, &v, &alpha, heads, true)
}

/// Plain channel self-attention with output projection.
pub fn self_attention(store: &ParamStore<f64>, p: &str, x: &Arr, heads: usize) -> Arr {
    let c = x.c;
    let qkv = dw(store, &format!("{p}.qkv_dw"), &pw(store, &format!("{p}.qkv_pw"), x));
    let alpha = param(store, &format!("{p}.alpha"));
    let a = channel_attention(&qkv.channels(0, c), &qkv.channels(c, c), &qkv.channels(2 * c, c), &alpha, heads, true);
    pw(store, &format!("{p}.out_pw"), &a)
}

pub fn inter_ppa(store: &ParamStore<f64>, p: &str, x: &Arr, m: &Arr, heads: usize) -> Arr {
    let fused = bippf(store, &format!("{p}.fusion"), x, m);
    self_attention(store, &format!("{p}.attn"), &fused, heads)
}

/// Pixel-unshuffle by index arithmetic: out channel `c*4 + dy*2 + dx`.
pub fn pixel_unshuffle(x: &Arr) -> Arr {
    let mut out = Arr::zeros(x.b, 4 * x.c, x.h / 2, x.w / 2);
    for n in 0..x.b {
        for c in 0..x.c {
            for y in 0..x.h {
                for xx in 0..x.w {
                    out.set(n, c * 4 + (y % 2) * 2 + xx % 2, y / 2, xx / 2, x.at(n, c, y, xx));
                }
            }
        }
    }
    out
}

/// `mean|d| + lambda / (2N) * sum(|Re D| + |Im D|)` with the DFT summed by definition.
pub fn freq_loss(pred: &Arr, target: &Arr, lambda: f64) -> f64 {
    let d = pred.zip(target, |a, b| a - b);
    let n = d.d.len() as f64;
    let spatial = d.d.iter().map(|v| v.abs()).sum::<f64>() / n;
    let (h, w) = (d.h, d.w);
    let mut spectral = 0.0;
    for b in 0..d.b {
        for c in 0..d.c {
            for u in 0..h {
                for v in 0..w {
                    let (mut re, mut im) = (0.0, 0.0);
                    for y in 0..h {
                        for x in 0..w {
                            let ang = -2.0 * std::f64::consts::PI * ((u * y) as f64 / h as f64 + (v * x) as f64 / w as f64);
                            re += d.at(b, c, y, x) * ang.cos();
                            im += d.at(b, c, y, x) * ang.sin();
                        }
                    }
                    spectral += re.abs() + im.abs();
                }
            }
        }
    }
    spatial + lambda * spectral / (2.0 * n)
}

/// SSIM by explicit 11x11 window sums with 2-D Gaussian weights.
pub fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let sigma = 1.5f64;
    let mut g = [[0.0f64; 11]; 11];
    let mut total = 0.0;
    for (i, row) in g.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
            total += *v;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut acc = 0.0;
    let mut count = 0;
    for y in 0..=h - 11 {
        for x in 0..=w - 11 {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let wt = g[i][j] / total;
                    let (p, q) = (a[(y + i) * w + x + j], b[(y + i) * w + x + j]);
                    ma += wt * p;
                    mb += wt * q;
                    saa += wt * p * p;
                    sbb += wt * q * q;
                    sab += wt * p * q;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    acc / count as f64
}

/// Deterministic uniform values in `[0, 1)` from a 64-bit LCG (Knuth's MMIX constants).
pub struct Lcg(pub u64);

impl Lcg {
    pub fn next(&mut self) -> f64 {
        self.0 = self.0.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (self.0 >> 11) as f64 / (1u64 << 53) as f64
    }

    pub fn tensor(&mut self, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| self.next()).collect()).unwrap()
    }

    pub fn tensor_signed(&mut self, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| 2.0 * self.next() - 1.0).collect()).unwrap()
    }
}
