//! Slice-level forward and backward kernels behind the graph operations.

use crate::scalar::Scalar;

/// Offset pair for 3x3 tap `k` (row-major, centre at 4).
#[inline]
pub(crate) fn tap_offset(k: usize) -> (isize, isize) {
    ((k / 3) as isize - 1, (k % 3) as isize - 1)
}

#[inline]
fn valid_range(len: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (len as isize - d).min(len as isize).max(0) as usize;
    (lo, hi.max(lo))
}

/// `out[y][x] += wt * inp[y + dy][x + dx]` wherever the source is inside the plane.
pub(crate) fn acc_shift<T: Scalar>(out: &mut [T], inp: &[T], h: usize, w: usize, d: (isize, isize), wt: T) {
    let (y0, y1) = valid_range(h, d.0);
    let (x0, x1) = valid_range(w, d.1);
    for y in y0..y1 {
        let sy = (y as isize + d.0) as usize;
        let src = &inp[sy * w + (x0 as isize + d.1) as usize..sy * w + (x1 as isize + d.1) as usize];
        let dst = &mut out[y * w + x0..y * w + x1];
        for (o, &s) in dst.iter_mut().zip(src) {
            *o += wt * s;
        }
    }
}

/// Adjoint of [`acc_shift`]: `dinp[y + dy][x + dx] += wt * dout[y][x]`.
pub(crate) fn acc_shift_adjoint<T: Scalar>(dinp: &mut [T], dout: &[T], h: usize, w: usize, d: (isize, isize), wt: T) {
    let (y0, y1) = valid_range(h, d.0);
    let (x0, x1) = valid_range(w, d.1);
    for y in y0..y1 {
        let sy = (y as isize + d.0) as usize;
        let dst = &mut dinp[sy * w + (x0 as isize + d.1) as usize..sy * w + (x1 as isize + d.1) as usize];
        let src = &dout[y * w + x0..y * w + x1];
        for (o, &s) in dst.iter_mut().zip(src) {
            *o += wt * s;
        }
    }
}

/// `sum dout[y][x] * inp[y + dy][x + dx]` over valid positions.
pub(crate) fn dot_shift<T: Scalar>(dout: &[T], inp: &[T], h: usize, w: usize, d: (isize, isize)) -> T {
    let (y0, y1) = valid_range(h, d.0);
    let (x0, x1) = valid_range(w, d.1);
    let mut acc = T::zero();
    for y in y0..y1 {
        let sy = (y as isize + d.0) as usize;
        let src = &inp[sy * w + (x0 as isize + d.1) as usize..sy * w + (x1 as isize + d.1) as usize];
        let g = &dout[y * w + x0..y * w + x1];
        acc += g.iter().zip(src).fold(T::zero(), |a, (&p, &q)| a + p * q);
    }
    acc
}

pub(crate) struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
}

pub(crate) fn conv1x1_forward<T: Scalar>(x: &[T], w: &[T], bias: Option<&[T]>, d: &ConvDims) -> Vec<T> {
    let hw = d.h * d.w;
    let mut out = vec![T::zero(); d.batch * d.c_out * hw];
    for b in 0..d.batch {
        let xb = &x[b * d.c_in * hw..(b + 1) * d.c_in * hw];
        let ob = &mut out[b * d.c_out * hw..(b + 1) * d.c_out * hw];
        T::gemm(d.c_out, d.c_in, hw, T::one(), w, (d.c_in, 1), xb, (hw, 1), T::zero(), ob, (hw, 1));
        if let Some(bias) = bias {
            for (plane, &bv) in ob.chunks_mut(hw).zip(bias) {
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

/// Returns `(dx, dw, dbias)`.
pub(crate) fn conv1x1_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dout: &[T],
    d: &ConvDims,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let hw = d.h * d.w;
    let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
    let mut dw = need_dw.then(|| vec![T::zero(); w.len()]);
    let mut db = need_db.then(|| vec![T::zero(); d.c_out]);
    for b in 0..d.batch {
        let xb = &x[b * d.c_in * hw..(b + 1) * d.c_in * hw];
        let gb = &dout[b * d.c_out * hw..(b + 1) * d.c_out * hw];
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * d.c_in * hw..(b + 1) * d.c_in * hw];
            T::gemm(d.c_in, d.c_out, hw, T::one(), w, (1, d.c_in), gb, (hw, 1), T::zero(), dxb, (hw, 1));
        }
        if let Some(dw) = dw.as_mut() {
            T::gemm(d.c_out, hw, d.c_in, T::one(), gb, (hw, 1), xb, (1, hw), T::one(), dw, (d.c_in, 1));
        }
        if let Some(db) = db.as_mut() {
            for (acc, plane) in db.iter_mut().zip(gb.chunks(hw)) {
                *acc += plane.iter().copied().sum::<T>();
            }
        }
    }
    (dx, dw, db)
}

pub(crate) fn depthwise3x3_forward<T: Scalar>(x: &[T], w: &[T], bias: Option<&[T]>, d: &ConvDims) -> Vec<T> {
    let hw = d.h * d.w;
    let c = d.c_in;
    let mut out = vec![T::zero(); x.len()];
    for (i, (oplane, xplane)) in out.chunks_mut(hw).zip(x.chunks(hw)).enumerate() {
        let ch = i % c;
        if let Some(bias) = bias {
            oplane.iter_mut().for_each(|v| *v = bias[ch]);
        }
        for k in 0..9 {
            acc_shift(oplane, xplane, d.h, d.w, tap_offset(k), w[ch * 9 + k]);
        }
    }
    out
}

pub(crate) fn depthwise3x3_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dout: &[T],
    d: &ConvDims,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let hw = d.h * d.w;
    let c = d.c_in;
    let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
    let mut dw = need_dw.then(|| vec![T::zero(); w.len()]);
    let mut db = need_db.then(|| vec![T::zero(); c]);
    for (i, (gplane, xplane)) in dout.chunks(hw).zip(x.chunks(hw)).enumerate() {
        let ch = i % c;
        if let Some(dx) = dx.as_mut() {
            let dxp = &mut dx[i * hw..(i + 1) * hw];
            for k in 0..9 {
                acc_shift_adjoint(dxp, gplane, d.h, d.w, tap_offset(k), w[ch * 9 + k]);
            }
        }
        if let Some(dw) = dw.as_mut() {
            for k in 0..9 {
                dw[ch * 9 + k] += dot_shift(gplane, xplane, d.h, d.w, tap_offset(k));
            }
        }
        if let Some(db) = db.as_mut() {
            db[ch] += gplane.iter().copied().sum::<T>();
        }
    }
    (dx, dw, db)
}

pub(crate) fn conv3x3_forward<T: Scalar>(x: &[T], w: &[T], bias: Option<&[T]>, d: &ConvDims) -> Vec<T> {
    let hw = d.h * d.w;
    let mut out = vec![T::zero(); d.batch * d.c_out * hw];
    for b in 0..d.batch {
        for co in 0..d.c_out {
            let oplane = &mut out[(b * d.c_out + co) * hw..(b * d.c_out + co + 1) * hw];
            if let Some(bias) = bias {
                oplane.iter_mut().for_each(|v| *v = bias[co]);
            }
            for ci in 0..d.c_in {
                let xplane = &x[(b * d.c_in + ci) * hw..(b * d.c_in + ci + 1) * hw];
                let wk = &w[(co * d.c_in + ci) * 9..(co * d.c_in + ci + 1) * 9];
                for (k, &wt) in wk.iter().enumerate() {
                    acc_shift(oplane, xplane, d.h, d.w, tap_offset(k), wt);
                }
            }
        }
    }
    out
}

pub(crate) fn conv3x3_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dout: &[T],
    d: &ConvDims,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let hw = d.h * d.w;
    let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
    let mut dw = need_dw.then(|| vec![T::zero(); w.len()]);
    let mut db = need_db.then(|| vec![T::zero(); d.c_out]);
    for b in 0..d.batch {
        for co in 0..d.c_out {
            let gplane = &dout[(b * d.c_out + co) * hw..(b * d.c_out + co + 1) * hw];
            if let Some(db) = db.as_mut() {
                db[co] += gplane.iter().copied().sum::<T>();
            }
            for ci in 0..d.c_in {
                let xr = (b * d.c_in + ci) * hw..(b * d.c_in + ci + 1) * hw;
                let wbase = (co * d.c_in + ci) * 9;
                if let Some(dx) = dx.as_mut() {
                    for k in 0..9 {
                        acc_shift_adjoint(&mut dx[xr.clone()], gplane, d.h, d.w, tap_offset(k), w[wbase + k]);
                    }
                }
                if let Some(dw) = dw.as_mut() {
                    for k in 0..9 {
                        dw[wbase + k] += dot_shift(gplane, &x[xr.clone()], d.h, d.w, tap_offset(k));
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;

/// Normalizes over channels independently at each pixel. Returns `(out, mean, rstd)`
/// with the statistics laid out as `(batch, h*w)`.
pub(crate) fn layer_norm_forward<T: Scalar>(
    x: &[T],
    weight: &[T],
    bias: &[T],
    batch: usize,
    c: usize,
    hw: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let eps = T::lit(LAYER_NORM_EPS);
    let inv_c = T::one() / T::lit(c as f64);
    let mut out = vec![T::zero(); x.len()];
    let mut mean = vec![T::zero(); batch * hw];
    let mut rstd = vec![T::zero(); batch * hw];
    for b in 0..batch {
        let xb = &x[b * c * hw..(b + 1) * c * hw];
        let mu = &mut mean[b * hw..(b + 1) * hw];
        for plane in xb.chunks(hw) {
            mu.iter_mut().zip(plane).for_each(|(m, &v)| *m += v);
        }
        mu.iter_mut().for_each(|m| *m *= inv_c);
        let rs = &mut rstd[b * hw..(b + 1) * hw];
        for plane in xb.chunks(hw) {
            rs.iter_mut().zip(plane).zip(mu.iter()).for_each(|((r, &v), &m)| *r += (v - m) * (v - m));
        }
        rs.iter_mut().for_each(|r| *r = T::one() / (*r * inv_c + eps).sqrt());
        let ob = &mut out[b * c * hw..(b + 1) * c * hw];
        for (ch, (oplane, plane)) in ob.chunks_mut(hw).zip(xb.chunks(hw)).enumerate() {
            let (g, bb) = (weight[ch], bias[ch]);
            for (((o, &v), &m), &r) in oplane.iter_mut().zip(plane).zip(mu.iter()).zip(rs.iter()) {
                *o = (v - m) * r * g + bb;
            }
        }
    }
    (out, mean, rstd)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn layer_norm_backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    mean: &[T],
    rstd: &[T],
    dout: &[T],
    batch: usize,
    c: usize,
    hw: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let inv_c = T::one() / T::lit(c as f64);
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); c];
    let mut db = vec![T::zero(); c];
    let mut sum_g = vec![T::zero(); hw];
    let mut sum_gx = vec![T::zero(); hw];
    for b in 0..batch {
        let xb = &x[b * c * hw..(b + 1) * c * hw];
        let gb = &dout[b * c * hw..(b + 1) * c * hw];
        let mu = &mean[b * hw..(b + 1) * hw];
        let rs = &rstd[b * hw..(b + 1) * hw];
        sum_g.iter_mut().for_each(|v| *v = T::zero());
        sum_gx.iter_mut().for_each(|v| *v = T::zero());
        for (ch, (gplane, xplane)) in gb.chunks(hw).zip(xb.chunks(hw)).enumerate() {
            let g = weight[ch];
            let mut dwc = T::zero();
            let mut dbc = T::zero();
            for p in 0..hw {
                let xhat = (xplane[p] - mu[p]) * rs[p];
                dwc += gplane[p] * xhat;
                dbc += gplane[p];
                let gx = gplane[p] * g;
                sum_g[p] += gx;
                sum_gx[p] += gx * xhat;
            }
            dw[ch] += dwc;
            db[ch] += dbc;
        }
        let dxb = &mut dx[b * c * hw..(b + 1) * c * hw];
        for (ch, ((dplane, gplane), xplane)) in dxb.chunks_mut(hw).zip(gb.chunks(hw)).zip(xb.chunks(hw)).enumerate() {
            let g = weight[ch];
            for p in 0..hw {
                let xhat = (xplane[p] - mu[p]) * rs[p];
                dplane[p] = rs[p] * (gplane[p] * g - sum_g[p] * inv_c - xhat * sum_gx[p] * inv_c);
            }
        }
    }
    (dx, dw, db)
}

pub(crate) const NORMALIZE_EPS: f64 = 1e-12;

/// Cached intermediates of one channel-attention evaluation.
pub(crate) struct AttentionCache<T> {
    /// Normalized (or raw) queries and keys, same layout as the inputs.
    pub qn: Vec<T>,
    pub kn: Vec<T>,
    /// Per-channel L2 norms, `(batch, channels)`; empty when normalization is off.
    pub qnorm: Vec<T>,
    pub knorm: Vec<T>,
    /// Softmax probabilities, `(batch, heads, c, c)`.
    pub probs: Vec<T>,
    /// Scaled logits `q.k / alpha`, same layout as `probs`.
    pub logits: Vec<T>,
}

pub(crate) struct AttentionDims {
    pub batch: usize,
    pub channels: usize,
    pub heads: usize,
    pub tokens: usize,
}

fn normalize_rows<T: Scalar>(src: &[T], n: usize) -> (Vec<T>, Vec<T>) {
    let eps = T::lit(NORMALIZE_EPS);
    let mut out = Vec::with_capacity(src.len());
    let mut norms = Vec::with_capacity(src.len() / n.max(1));
    for row in src.chunks(n) {
        let norm = row.iter().fold(T::zero(), |a, &v| a + v * v).sqrt();
        let denom = norm.max(eps);
        out.extend(row.iter().map(|&v| v / denom));
        norms.push(norm);
    }
    (out, norms)
}

/// Row-wise softmax in place.
pub(crate) fn softmax_rows<T: Scalar>(m: &mut [T], cols: usize) {
    for row in m.chunks_mut(cols) {
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
}

pub(crate) fn attention_forward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    alpha: &[T],
    normalize: bool,
    d: &AttentionDims,
) -> (Vec<T>, AttentionCache<T>) {
    let n = d.tokens;
    let c = d.channels / d.heads;
    let (qn, qnorm, kn, knorm) = if normalize {
        let (qn, qnorm) = normalize_rows(q, n);
        let (kn, knorm) = normalize_rows(k, n);
        (qn, qnorm, kn, knorm)
    } else {
        (q.to_vec(), Vec::new(), k.to_vec(), Vec::new())
    };
    let mut out = vec![T::zero(); v.len()];
    let mut probs = vec![T::zero(); d.batch * d.heads * c * c];
    let mut logits = vec![T::zero(); d.batch * d.heads * c * c];
    for b in 0..d.batch {
        for h in 0..d.heads {
            let off = (b * d.channels + h * c) * n;
            let aoff = (b * d.heads + h) * c * c;
            let inv_alpha = T::one() / alpha[h];
            let s = &mut logits[aoff..aoff + c * c];
            T::gemm(c, n, c, inv_alpha, &qn[off..off + c * n], (n, 1), &kn[off..off + c * n], (1, n), T::zero(), s, (c, 1));
            let p = &mut probs[aoff..aoff + c * c];
            p.copy_from_slice(s);
            softmax_rows(p, c);
            T::gemm(c, c, n, T::one(), p, (c, 1), &v[off..off + c * n], (n, 1), T::zero(), &mut out[off..off + c * n], (n, 1));
        }
    }
    (out, AttentionCache { qn, kn, qnorm, knorm, probs, logits })
}

pub(crate) struct AttentionGrads<T> {
    pub dq: Vec<T>,
    pub dk: Vec<T>,
    pub dv: Vec<T>,
    pub dalpha: Vec<T>,
}

fn normalize_backward<T: Scalar>(dn: &mut [T], xn: &[T], norms: &[T], n: usize) {
    let eps = T::lit(NORMALIZE_EPS);
    for ((g, xr), &norm) in dn.chunks_mut(n).zip(xn.chunks(n)).zip(norms) {
        if norm > eps {
            let dot = g.iter().zip(xr).fold(T::zero(), |a, (&p, &q)| a + p * q);
            for (gv, &xv) in g.iter_mut().zip(xr) {
                *gv = (*gv - xv * dot) / norm;
            }
        } else {
            g.iter_mut().for_each(|gv| *gv /= eps);
        }
    }
}

pub(crate) fn attention_backward<T: Scalar>(
    v: &[T],
    alpha: &[T],
    cache: &AttentionCache<T>,
    dout: &[T],
    normalize: bool,
    d: &AttentionDims,
) -> AttentionGrads<T> {
    let n = d.tokens;
    let c = d.channels / d.heads;
    let mut dq = vec![T::zero(); v.len()];
    let mut dk = vec![T::zero(); v.len()];
    let mut dv = vec![T::zero(); v.len()];
    let mut dalpha = vec![T::zero(); d.heads];
    let mut da = vec![T::zero(); c * c];
    for b in 0..d.batch {
        for h in 0..d.heads {
            let off = (b * d.channels + h * c) * n;
            let aoff = (b * d.heads + h) * c * c;
            let p = &cache.probs[aoff..aoff + c * c];
            let s = &cache.logits[aoff..aoff + c * c];
            let g = &dout[off..off + c * n];
            let inv_alpha = T::one() / alpha[h];
            // dA = dO V^T
            T::gemm(c, n, c, T::one(), g, (n, 1), &v[off..off + c * n], (1, n), T::zero(), &mut da, (c, 1));
            // dV = A^T dO
            T::gemm(c, c, n, T::one(), p, (1, c), g, (n, 1), T::zero(), &mut dv[off..off + c * n], (n, 1));
            // softmax backward, dS overwrites dA
            for (drow, prow) in da.chunks_mut(c).zip(p.chunks(c)) {
                let dot = drow.iter().zip(prow).fold(T::zero(), |a, (&x, &y)| a + x * y);
                for (dv_, &pv) in drow.iter_mut().zip(prow) {
                    *dv_ = pv * (*dv_ - dot);
                }
            }
            dalpha[h] -= da.iter().zip(s).fold(T::zero(), |a, (&x, &y)| a + x * y) * inv_alpha;
            T::gemm(c, c, n, inv_alpha, &da, (c, 1), &cache.kn[off..off + c * n], (n, 1), T::zero(), &mut dq[off..off + c * n], (n, 1));
            T::gemm(c, c, n, inv_alpha, &da, (1, c), &cache.qn[off..off + c * n], (n, 1), T::zero(), &mut dk[off..off + c * n], (n, 1));
        }
    }
    if normalize {
        normalize_backward(&mut dq, &cache.qn, &cache.qnorm, n);
        normalize_backward(&mut dk, &cache.kn, &cache.knorm, n);
    }
    AttentionGrads { dq, dk, dv, dalpha }
}

/// Space-to-channel rearrangement with factor 2 (`c*4 + dy*2 + dx` channel order).
pub(crate) fn pixel_unshuffle<T: Scalar>(x: &[T], batch: usize, c: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![T::zero(); x.len()];
    for b in 0..batch {
        for ch in 0..c {
            let src = &x[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
            for dy in 0..2 {
                for dx in 0..2 {
                    let oc = ch * 4 + dy * 2 + dx;
                    let dst = &mut out[(b * c * 4 + oc) * oh * ow..(b * c * 4 + oc + 1) * oh * ow];
                    for y in 0..oh {
                        for xx in 0..ow {
                            dst[y * ow + xx] = src[(2 * y + dy) * w + 2 * xx + dx];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Inverse of [`pixel_unshuffle`]; `c` is the input channel count (multiple of 4).
pub(crate) fn pixel_shuffle<T: Scalar>(x: &[T], batch: usize, c: usize, h: usize, w: usize) -> Vec<T> {
    let oc = c / 4;
    let (oh, ow) = (h * 2, w * 2);
    let mut out = vec![T::zero(); x.len()];
    for b in 0..batch {
        for ch in 0..oc {
            let dst = &mut out[(b * oc + ch) * oh * ow..(b * oc + ch + 1) * oh * ow];
            for dy in 0..2 {
                for dx in 0..2 {
                    let ic = ch * 4 + dy * 2 + dx;
                    let src = &x[(b * c + ic) * h * w..(b * c + ic + 1) * h * w];
                    for y in 0..h {
                        for xx in 0..w {
                            dst[(2 * y + dy) * ow + 2 * xx + dx] = src[y * w + xx];
                        }
                    }
                }
            }
        }
    }
    out
}

#[inline]
pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    half * x * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

#[inline]
pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    let cdf = half * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * half).exp() * T::lit(0.398_942_280_401_432_7);
    cdf + x * pdf
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub(crate) fn sign<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}
