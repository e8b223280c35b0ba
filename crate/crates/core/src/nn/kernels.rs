//! Slice-level forward/backward kernels for the graph operations.

use super::tensor::{matmul, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub k: usize,
    pub cout: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch_len(&self) -> usize {
        self.k * self.k * self.cin
    }
}

/// Input columns `[x0, x1)` covered by output column `ox`, clipped to the image, plus the
/// kernel offset of `x0`.
#[inline]
fn tap_span(o: usize, stride: usize, pad: usize, k: usize, size: usize) -> (usize, usize, usize) {
    let start = (o * stride) as isize - pad as isize;
    let x0 = start.max(0) as usize;
    let x1 = ((start + k as isize).min(size as isize)).max(0) as usize;
    (x0, x1.max(x0), (x0 as isize - start) as usize)
}

fn im2col<T: Scalar>(img: &[T], g: &ConvGeom, cols: &mut [T]) {
    let kk = g.patch_len();
    let span = g.k * g.cin;
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let row = &mut cols[(oy * g.wo + ox) * kk..(oy * g.wo + ox + 1) * kk];
            let (x0, x1, kx0) = tap_span(ox, g.stride, g.pad, g.k, g.w);
            for ky in 0..g.k {
                let dst = &mut row[ky * span..(ky + 1) * span];
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize || x0 == x1 {
                    dst.fill(T::zero());
                    continue;
                }
                let lead = kx0 * g.cin;
                let len = (x1 - x0) * g.cin;
                dst[..lead].fill(T::zero());
                let src = (iy as usize * g.w + x0) * g.cin;
                for (d, s) in dst[lead..lead + len].iter_mut().zip(&img[src..src + len]) {
                    *d = *s;
                }
                dst[lead + len..].fill(T::zero());
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, img: &mut [T]) {
    let kk = g.patch_len();
    let span = g.k * g.cin;
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let row = &cols[(oy * g.wo + ox) * kk..(oy * g.wo + ox + 1) * kk];
            let (x0, x1, kx0) = tap_span(ox, g.stride, g.pad, g.k, g.w);
            if x0 == x1 {
                continue;
            }
            for ky in 0..g.k {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                let lead = ky * span + kx0 * g.cin;
                let len = (x1 - x0) * g.cin;
                let dst = (iy as usize * g.w + x0) * g.cin;
                for (d, s) in img[dst..dst + len].iter_mut().zip(&row[lead..lead + len]) {
                    *d += *s;
                }
            }
        }
    }
}

pub(crate) fn conv_forward<T: Scalar>(x: &[T], weight: &[T], g: &ConvGeom) -> Vec<T> {
    let mut y = vec![T::zero(); g.n * g.ho * g.wo * g.cout];
    if g.pointwise() {
        matmul(g.n * g.h * g.w, g.cin, g.cout, x, false, weight, false, &mut y, false);
        return y;
    }
    let kk = g.patch_len();
    let in_len = g.h * g.w * g.cin;
    let out_len = g.ho * g.wo * g.cout;
    let mut cols = vec![T::zero(); g.ho * g.wo * kk];
    for b in 0..g.n {
        im2col(&x[b * in_len..(b + 1) * in_len], g, &mut cols);
        matmul(
            g.ho * g.wo,
            kk,
            g.cout,
            &cols,
            false,
            weight,
            false,
            &mut y[b * out_len..(b + 1) * out_len],
            false,
        );
    }
    y
}

/// Returns `(dx, dw)`, each computed only when requested.
pub(crate) fn conv_backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    dy: &[T],
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let kk = g.patch_len();
    let mut dw = need_dw.then(|| vec![T::zero(); kk * g.cout]);
    let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
    if g.pointwise() {
        let m = g.n * g.h * g.w;
        if let Some(dw) = dw.as_mut() {
            matmul(g.cin, m, g.cout, x, true, dy, false, dw, false);
        }
        if let Some(dx) = dx.as_mut() {
            matmul(m, g.cout, g.cin, dy, false, weight, true, dx, false);
        }
        return (dx, dw);
    }
    let in_len = g.h * g.w * g.cin;
    let out_len = g.ho * g.wo * g.cout;
    let rows = g.ho * g.wo;
    let mut cols = vec![T::zero(); rows * kk];
    for b in 0..g.n {
        let dyb = &dy[b * out_len..(b + 1) * out_len];
        if let Some(dw) = dw.as_mut() {
            im2col(&x[b * in_len..(b + 1) * in_len], g, &mut cols);
            matmul(kk, rows, g.cout, &cols, true, dyb, false, dw, true);
        }
        if let Some(dx) = dx.as_mut() {
            matmul(rows, g.cout, kk, dyb, false, weight, true, &mut cols, false);
            col2im(&cols, g, &mut dx[b * in_len..(b + 1) * in_len]);
        }
    }
    (dx, dw)
}

/// Per-channel statistics over all leading axes of a channels-last buffer.
pub(crate) fn channel_mean_var<T: Scalar>(x: &[T], c: usize) -> (Vec<f64>, Vec<f64>) {
    let m = x.len() / c;
    let span = tile(&vec![0u8; c]).len();
    let mut acc = vec![0.0f64; span];
    tiled_spans(x.len(), span, |r| {
        for (a, v) in acc.iter_mut().zip(&x[r]) {
            *a += v.to_f64c();
        }
    });
    let mut mean = untile(&acc, c);
    mean.iter_mut().for_each(|v| *v /= m as f64);
    let mean_t = tile(&mean);
    acc.iter_mut().for_each(|a| *a = 0.0);
    tiled_spans(x.len(), span, |r| {
        for ((a, v), mu) in acc.iter_mut().zip(&x[r]).zip(&mean_t) {
            let d = v.to_f64c() - mu;
            *a += d * d;
        }
    });
    let mut var = untile(&acc, c);
    var.iter_mut().for_each(|v| *v /= m as f64);
    (mean, var)
}

pub(crate) struct PoolGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

/// Windowed max; returns values and the flat input index of each window's maximum.
pub(crate) fn max_pool_forward<T: Scalar>(x: &[T], g: &PoolGeom) -> (Vec<T>, Vec<u32>) {
    let out_len = g.n * g.ho * g.wo * g.c;
    let mut y = vec![T::neg_infinity(); out_len];
    let mut arg = vec![0u32; out_len];
    for b in 0..g.n {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let obase = ((b * g.ho + oy) * g.wo + ox) * g.c;
                for ky in 0..g.k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.k {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let ibase = ((b * g.h + iy as usize) * g.w + ix as usize) * g.c;
                        for ch in 0..g.c {
                            let v = x[ibase + ch];
                            if v > y[obase + ch] {
                                y[obase + ch] = v;
                                arg[obase + ch] = (ibase + ch) as u32;
                            }
                        }
                    }
                }
            }
        }
    }
    (y, arg)
}

/// Maps a normalized coordinate in `[-1, 1]` to a pixel coordinate (pixel centers at integers).
#[inline]
pub(crate) fn unnormalize<T: Scalar>(coord: T, size: usize) -> T {
    let two = T::from_f64c(2.0);
    ((coord + T::one()) * T::from_usize(size).unwrap() - T::one()) / two
}

/// Bilinear taps `(y0, y1, x0, x1, wy, wx)` with border clamping, plus whether each axis was clamped.
#[inline]
pub(crate) fn bilinear_taps<T: Scalar>(
    py: T,
    px: T,
    h: usize,
    w: usize,
) -> (usize, usize, usize, usize, T, T, bool, bool) {
    let clamp = |p: T, n: usize| -> (T, bool) {
        let hi = T::from_usize(n - 1).unwrap();
        if p < T::zero() {
            (T::zero(), true)
        } else if p > hi {
            (hi, true)
        } else {
            (p, false)
        }
    };
    let (py, cy) = clamp(py, h);
    let (px, cx) = clamp(px, w);
    let y0 = py.floor().to_usize().unwrap().min(h - 1);
    let x0 = px.floor().to_usize().unwrap().min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let wy = py - T::from_usize(y0).unwrap();
    let wx = px - T::from_usize(x0).unwrap();
    (y0, y1, x0, x1, wy, wx, cy, cx)
}

/// Per-channel vector repeated to a span of at least 64 elements, so channel-wise loops
/// over channels-last buffers can run on long contiguous chunks.
pub(crate) fn tile<T: Copy>(v: &[T]) -> Vec<T> {
    let reps = 64usize.div_ceil(v.len().max(1));
    v.repeat(reps)
}

/// Folds a tiled accumulator back to one value per channel.
pub(crate) fn untile<T: Copy + std::ops::AddAssign + Default>(acc: &[T], c: usize) -> Vec<T> {
    let mut out = vec![T::default(); c];
    for chunk in acc.chunks_exact(c) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += *v;
        }
    }
    out
}

/// Calls `f(chunk, tiled_offset)` over `len` elements in tiled spans and a channel-aligned tail.
#[inline]
pub(crate) fn tiled_spans(len: usize, span: usize, mut f: impl FnMut(std::ops::Range<usize>)) {
    let mut start = 0;
    while start + span <= len {
        f(start..start + span);
        start += span;
    }
    if start < len {
        f(start..len);
    }
}
