//! Raw forward/backward numerics on flat NCHW buffers.
//!
//! Every reduction that crosses samples runs sequentially in sample order,
//! so results are bit-identical regardless of how many threads compute the
//! per-sample parts.

use super::tensor::Real;
use crate::error::{Error, Result};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Apply `f(sample_index, out_chunk)` to every per-sample chunk of `out`.
pub(crate) fn per_sample<T: Real>(out: &mut [T], chunk: usize, f: impl Fn(usize, &mut [T]) + Sync + Send) {
    if chunk == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    out.par_chunks_mut(chunk).enumerate().for_each(|(n, c)| f(n, c));
    #[cfg(not(feature = "parallel"))]
    out.chunks_mut(chunk).enumerate().for_each(|(n, c)| f(n, c));
}

/// Map each sample index to a value, preserving order.
pub(crate) fn map_samples<R: Send>(n: usize, f: impl Fn(usize) -> R + Sync + Send) -> Vec<R> {
    #[cfg(feature = "parallel")]
    return (0..n).into_par_iter().map(f).collect();
    #[cfg(not(feature = "parallel"))]
    (0..n).map(f).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, pad: usize, groups: usize) -> Result<Self> {
        let [n, c, h, w] = *input else {
            return Err(Error::contract(format!("conv2d input must be NCHW, got {input:?}")));
        };
        let [o, ci, kh, kw] = *weight else {
            return Err(Error::contract(format!("conv2d weight must be O×I×k×k, got {weight:?}")));
        };
        if groups == 0 || c % groups != 0 || o % groups != 0 {
            return Err(Error::contract(format!(
                "channels {c}/{o} not divisible by groups {groups}"
            )));
        }
        if ci != c / groups {
            return Err(Error::contract(format!(
                "weight expects {ci} input channels per group, input has {}",
                c / groups
            )));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::contract(format!("kernel must be square and odd, got {kh}×{kw}")));
        }
        if stride == 0 {
            return Err(Error::contract("stride must be ≥ 1"));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::contract("kernel larger than padded input"));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        Ok(ConvGeom {
            n,
            c,
            h,
            w,
            o,
            k: kh,
            stride,
            pad,
            groups,
            oh,
            ow,
        })
    }

    fn cin_per_group(&self) -> usize {
        self.c / self.groups
    }

    fn cout_per_group(&self) -> usize {
        self.o / self.groups
    }
}

/// Output indices `[lo, hi)` whose input coordinate `o*stride + off - pad`
/// falls inside `[0, in_len)`.
#[inline]
fn valid_range(off: usize, pad: usize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let lo = if off >= pad {
        0
    } else {
        (pad - off).div_ceil(stride)
    };
    let hi = if in_len + pad > off {
        ((in_len - 1 + pad - off) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo.min(hi), hi)
}

pub fn conv2d_forward<T: Real>(g: &ConvGeom, x: &[T], w: &[T], b: Option<&[T]>) -> Vec<T> {
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    let (cig, cog, k) = (g.cin_per_group(), g.cout_per_group(), g.k);
    let mut out = vec![T::zero(); g.n * g.o * plane_out];
    per_sample(&mut out, g.o * plane_out, |n, y| {
        let xs = &x[n * g.c * plane_in..(n + 1) * g.c * plane_in];
        for o in 0..g.o {
            let yo = &mut y[o * plane_out..(o + 1) * plane_out];
            if let Some(b) = b {
                yo.iter_mut().for_each(|v| *v = b[o]);
            }
            let grp = o / cog;
            for cl in 0..cig {
                let ci = grp * cig + cl;
                let xp = &xs[ci * plane_in..(ci + 1) * plane_in];
                let wk = &w[(o * cig + cl) * k * k..(o * cig + cl + 1) * k * k];
                for ky in 0..k {
                    let (oy_lo, oy_hi) = valid_range(ky, g.pad, g.stride, g.h, g.oh);
                    for kx in 0..k {
                        let wv = wk[ky * k + kx];
                        if wv == T::zero() {
                            continue;
                        }
                        let (ox_lo, ox_hi) = valid_range(kx, g.pad, g.stride, g.w, g.ow);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        for oy in oy_lo..oy_hi {
                            let iy = oy * g.stride + ky - g.pad;
                            let xrow = &xp[iy * g.w..(iy + 1) * g.w];
                            let yrow = &mut yo[oy * g.ow..(oy + 1) * g.ow];
                            if g.stride == 1 {
                                let ix0 = ox_lo + kx - g.pad;
                                for (yv, &xv) in yrow[ox_lo..ox_hi]
                                    .iter_mut()
                                    .zip(&xrow[ix0..ix0 + (ox_hi - ox_lo)])
                                {
                                    *yv = *yv + wv * xv;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    let ix = ox * g.stride + kx - g.pad;
                                    yrow[ox] = yrow[ox] + wv * xrow[ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

/// Gradient of conv2d with respect to its input.
pub fn conv2d_grad_input<T: Real>(g: &ConvGeom, w: &[T], gy: &[T]) -> Vec<T> {
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    let (cig, cog, k) = (g.cin_per_group(), g.cout_per_group(), g.k);
    let mut gx = vec![T::zero(); g.n * g.c * plane_in];
    per_sample(&mut gx, g.c * plane_in, |n, gxs| {
        let gys = &gy[n * g.o * plane_out..(n + 1) * g.o * plane_out];
        for o in 0..g.o {
            let gyo = &gys[o * plane_out..(o + 1) * plane_out];
            let grp = o / cog;
            for cl in 0..cig {
                let ci = grp * cig + cl;
                let gxp = &mut gxs[ci * plane_in..(ci + 1) * plane_in];
                let wk = &w[(o * cig + cl) * k * k..(o * cig + cl + 1) * k * k];
                for ky in 0..k {
                    let (oy_lo, oy_hi) = valid_range(ky, g.pad, g.stride, g.h, g.oh);
                    for kx in 0..k {
                        let wv = wk[ky * k + kx];
                        let (ox_lo, ox_hi) = valid_range(kx, g.pad, g.stride, g.w, g.ow);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        for oy in oy_lo..oy_hi {
                            let iy = oy * g.stride + ky - g.pad;
                            let grow = &gyo[oy * g.ow..(oy + 1) * g.ow];
                            let xrow = &mut gxp[iy * g.w..(iy + 1) * g.w];
                            if g.stride == 1 {
                                let ix0 = ox_lo + kx - g.pad;
                                for (xv, &gv) in xrow[ix0..ix0 + (ox_hi - ox_lo)]
                                    .iter_mut()
                                    .zip(&grow[ox_lo..ox_hi])
                                {
                                    *xv = *xv + wv * gv;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    let ix = ox * g.stride + kx - g.pad;
                                    xrow[ix] = xrow[ix] + wv * grow[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    gx
}

/// Gradients of conv2d with respect to weights and bias, summed over the
/// batch in sample order.
pub fn conv2d_grad_params<T: Real>(g: &ConvGeom, x: &[T], gy: &[T]) -> (Vec<T>, Vec<T>) {
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    let (cig, cog, k) = (g.cin_per_group(), g.cout_per_group(), g.k);
    let wlen = g.o * cig * k * k;
    let partials = map_samples(g.n, |n| {
        let xs = &x[n * g.c * plane_in..(n + 1) * g.c * plane_in];
        let gys = &gy[n * g.o * plane_out..(n + 1) * g.o * plane_out];
        let mut gw = vec![T::zero(); wlen];
        let mut gb = vec![T::zero(); g.o];
        for o in 0..g.o {
            let gyo = &gys[o * plane_out..(o + 1) * plane_out];
            gb[o] = gyo.iter().fold(T::zero(), |a, &v| a + v);
            let grp = o / cog;
            for cl in 0..cig {
                let ci = grp * cig + cl;
                let xp = &xs[ci * plane_in..(ci + 1) * plane_in];
                let base = (o * cig + cl) * k * k;
                for ky in 0..k {
                    let (oy_lo, oy_hi) = valid_range(ky, g.pad, g.stride, g.h, g.oh);
                    for kx in 0..k {
                        let (ox_lo, ox_hi) = valid_range(kx, g.pad, g.stride, g.w, g.ow);
                        let mut acc = T::zero();
                        for oy in oy_lo..oy_hi {
                            let iy = oy * g.stride + ky - g.pad;
                            let grow = &gyo[oy * g.ow..(oy + 1) * g.ow];
                            let xrow = &xp[iy * g.w..(iy + 1) * g.w];
                            if g.stride == 1 {
                                let ix0 = ox_lo + kx - g.pad;
                                for (&gv, &xv) in grow[ox_lo..ox_hi]
                                    .iter()
                                    .zip(&xrow[ix0..ix0 + (ox_hi - ox_lo)])
                                {
                                    acc = acc + gv * xv;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    acc = acc + grow[ox] * xrow[ox * g.stride + kx - g.pad];
                                }
                            }
                        }
                        gw[base + ky * k + kx] = acc;
                    }
                }
            }
        }
        (gw, gb)
    });
    let mut gw = vec![T::zero(); wlen];
    let mut gb = vec![T::zero(); g.o];
    for (pw, pb) in partials {
        for (a, b) in gw.iter_mut().zip(pw) {
            *a = *a + b;
        }
        for (a, b) in gb.iter_mut().zip(pb) {
            *a = *a + b;
        }
    }
    (gw, gb)
}

/// Mean of a slice computed as `first + Σ(x − first)/n`, so a constant
/// slice yields its value exactly.
#[inline]
pub fn shifted_mean<T: Real>(v: &[T]) -> T {
    let first = v[0];
    let s = v.iter().fold(T::zero(), |a, &x| a + (x - first));
    first + s / T::of(v.len() as f64)
}

/// Saved statistics of a group-norm forward pass.
#[derive(Clone, Debug)]
pub struct GroupNormCache<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

pub const GN_EPS: f64 = 1e-5;

pub fn group_norm_forward<T: Real>(
    dims: (usize, usize, usize, usize),
    groups: usize,
    x: &[T],
    gamma: &[T],
    beta: &[T],
) -> (Vec<T>, GroupNormCache<T>) {
    let (n, c, h, w) = dims;
    let cpg = c / groups;
    let m = cpg * h * w;
    let mut xhat = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); n * groups];
    for s in 0..n {
        for gi in 0..groups {
            let off = (s * c + gi * cpg) * h * w;
            let seg = &x[off..off + m];
            let mean = shifted_mean(seg);
            let var = seg.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / T::of(m as f64);
            let r = T::one() / (var + T::of(GN_EPS)).sqrt();
            rstd[s * groups + gi] = r;
            for (i, &v) in seg.iter().enumerate() {
                let ch = gi * cpg + i / (h * w);
                let xh = (v - mean) * r;
                xhat[off + i] = xh;
                y[off + i] = gamma[ch] * xh + beta[ch];
            }
        }
    }
    (y, GroupNormCache { xhat, rstd })
}

/// Returns (grad_x, grad_gamma, grad_beta).
pub fn group_norm_backward<T: Real>(
    dims: (usize, usize, usize, usize),
    groups: usize,
    cache: &GroupNormCache<T>,
    gamma: &[T],
    gy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (n, c, h, w) = dims;
    let cpg = c / groups;
    let hw = h * w;
    let m = cpg * hw;
    let mf = T::of(m as f64);
    let mut gx = vec![T::zero(); gy.len()];
    let mut gg = vec![T::zero(); c];
    let mut gbeta = vec![T::zero(); c];
    for s in 0..n {
        for gi in 0..groups {
            let off = (s * c + gi * cpg) * hw;
            let mut sum_d = T::zero();
            let mut sum_dx = T::zero();
            for i in 0..m {
                let ch = gi * cpg + i / hw;
                let d = gy[off + i] * gamma[ch];
                sum_d = sum_d + d;
                sum_dx = sum_dx + d * cache.xhat[off + i];
                gg[ch] = gg[ch] + gy[off + i] * cache.xhat[off + i];
                gbeta[ch] = gbeta[ch] + gy[off + i];
            }
            let r = cache.rstd[s * groups + gi];
            for i in 0..m {
                let ch = gi * cpg + i / hw;
                let d = gy[off + i] * gamma[ch];
                gx[off + i] = r / mf * (mf * d - sum_d - cache.xhat[off + i] * sum_dx);
            }
        }
    }
    (gx, gg, gbeta)
}

/// Source taps for half-pixel bilinear upsampling along one axis:
/// `(i0, i1, λ)` with value `a + λ(b − a)`.
pub fn bilinear_taps(in_len: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..in_len * factor)
        .map(|d| {
            let src = ((d as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn upsample_bilinear_forward<T: Real>(dims: (usize, usize, usize, usize), f: usize, x: &[T]) -> Vec<T> {
    let (n, c, h, w) = dims;
    let ty = bilinear_taps(h, f);
    let tx = bilinear_taps(w, f);
    let (oh, ow) = (h * f, w * f);
    let mut out = vec![T::zero(); n * c * oh * ow];
    for p in 0..n * c {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let ly = T::of(ly);
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let lx = T::of(lx);
                let top = src[y0 * w + x0] + lx * (src[y0 * w + x1] - src[y0 * w + x0]);
                let bot = src[y1 * w + x0] + lx * (src[y1 * w + x1] - src[y1 * w + x0]);
                dst[oy * ow + ox] = top + ly * (bot - top);
            }
        }
    }
    out
}

pub fn upsample_bilinear_backward<T: Real>(dims: (usize, usize, usize, usize), f: usize, gy: &[T]) -> Vec<T> {
    let (n, c, h, w) = dims;
    let ty = bilinear_taps(h, f);
    let tx = bilinear_taps(w, f);
    let (oh, ow) = (h * f, w * f);
    let mut gx = vec![T::zero(); n * c * h * w];
    for p in 0..n * c {
        let g = &gy[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut gx[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let ly = T::of(ly);
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let lx = T::of(lx);
                let v = g[oy * ow + ox];
                let top = v * (T::one() - ly);
                let bot = v * ly;
                dst[y0 * w + x0] = dst[y0 * w + x0] + top * (T::one() - lx);
                dst[y0 * w + x1] = dst[y0 * w + x1] + top * lx;
                dst[y1 * w + x0] = dst[y1 * w + x0] + bot * (T::one() - lx);
                dst[y1 * w + x1] = dst[y1 * w + x1] + bot * lx;
            }
        }
    }
    gx
}

/// 2×2 average pooling with ceil output size; border windows average over
/// the pixels they cover.
pub fn avg_pool2_forward<T: Real>(dims: (usize, usize, usize, usize), x: &[T]) -> Vec<T> {
    let (n, c, h, w) = dims;
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = vec![T::zero(); n * c * oh * ow];
    for p in 0..n * c {
        let src = &x[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = T::zero();
                let mut cnt = 0usize;
                for iy in 2 * oy..(2 * oy + 2).min(h) {
                    for ix in 2 * ox..(2 * ox + 2).min(w) {
                        acc = acc + src[iy * w + ix];
                        cnt += 1;
                    }
                }
                out[p * oh * ow + oy * ow + ox] = acc / T::of(cnt as f64);
            }
        }
    }
    out
}

pub fn avg_pool2_backward<T: Real>(dims: (usize, usize, usize, usize), gy: &[T]) -> Vec<T> {
    let (n, c, h, w) = dims;
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut gx = vec![T::zero(); n * c * h * w];
    for p in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let ys = 2 * oy..(2 * oy + 2).min(h);
                let xs = 2 * ox..(2 * ox + 2).min(w);
                let cnt = ys.len() * xs.len();
                let g = gy[p * oh * ow + oy * ow + ox] / T::of(cnt as f64);
                for iy in ys {
                    for ix in xs.clone() {
                        gx[p * h * w + iy * w + ix] = gx[p * h * w + iy * w + ix] + g;
                    }
                }
            }
        }
    }
    gx
}
