//! Hand-crafted image descriptors with fixed dimensionalities and final L2 normalization.
//!
//! Each extractor has a `*_raw` companion that returns the pre-normalization
//! statistics (counts, moments, filter statistics) so independent oracles can compare
//! them bin by bin.

use std::f64::consts::PI;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::{self, ImageBuffer};

#[derive(Debug, Error)]
pub enum DescriptorError {
    #[error("invalid size: {0}")]
    InvalidSize(String),
    #[error("expected {expected} channel(s), got {got}")]
    Channels { expected: usize, got: usize },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("unsupported descriptor `{0}`")]
    Unsupported(String),
    #[error("feature file line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DescriptorKind {
    HistL,
    HistRgb,
    Chromaticity,
    GistRgb,
    GaborL,
    GaborRgb,
    LbpL,
    LbpRgb,
    Lcc,
    LbpLcc,
    Hog,
}

/// Descriptors named in the literature but not implemented here.
pub const UNSUPPORTED_KINDS: [&str; 5] = ["cedd", "dtcwt_l", "dtcwt_rgb", "bovw_sift", "sift"];

impl DescriptorKind {
    pub const ALL: [DescriptorKind; 11] = [
        DescriptorKind::HistL,
        DescriptorKind::HistRgb,
        DescriptorKind::Chromaticity,
        DescriptorKind::GistRgb,
        DescriptorKind::GaborL,
        DescriptorKind::GaborRgb,
        DescriptorKind::LbpL,
        DescriptorKind::LbpRgb,
        DescriptorKind::Lcc,
        DescriptorKind::LbpLcc,
        DescriptorKind::Hog,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DescriptorKind::HistL => "hist_l",
            DescriptorKind::HistRgb => "hist_rgb",
            DescriptorKind::Chromaticity => "chromaticity",
            DescriptorKind::GistRgb => "gist_rgb",
            DescriptorKind::GaborL => "gabor_l",
            DescriptorKind::GaborRgb => "gabor_rgb",
            DescriptorKind::LbpL => "lbp_l",
            DescriptorKind::LbpRgb => "lbp_rgb",
            DescriptorKind::Lcc => "lcc",
            DescriptorKind::LbpLcc => "lbp_lcc",
            DescriptorKind::Hog => "hog",
        }
    }

    pub fn dim(self) -> usize {
        match self {
            DescriptorKind::HistL => 256,
            DescriptorKind::HistRgb => 768,
            DescriptorKind::Chromaticity => 10,
            DescriptorKind::GistRgb => 512,
            DescriptorKind::GaborL => 32,
            DescriptorKind::GaborRgb => 96,
            DescriptorKind::LbpL => 243,
            DescriptorKind::LbpRgb => 729,
            DescriptorKind::Lcc => 256,
            DescriptorKind::LbpLcc => 499,
            DescriptorKind::Hog => 81,
        }
    }

    pub fn spec(self) -> DescriptorSpec {
        use ColorSpace::*;
        let (color_space, params) = match self {
            DescriptorKind::HistL => (Luminance, "bins=256"),
            DescriptorKind::HistRgb => (Rgb, "bins=256 per channel"),
            DescriptorKind::Chromaticity => (Rgb, "orders=(1,0),(0,1),(2,0),(1,1),(0,2) trace+distribution"),
            DescriptorKind::GistRgb => (Rgb, "orientations=8 scales=4 grid=4x4 size=128"),
            DescriptorKind::GaborL => (Luminance, "orientations=6 frequencies=4"),
            DescriptorKind::GaborRgb => (Rgb, "orientations=6 frequencies=4 per channel"),
            DescriptorKind::LbpL => (Luminance, "radius=2 points=16 uniform"),
            DescriptorKind::LbpRgb => (Rgb, "radius=2 points=16 uniform per channel"),
            DescriptorKind::Lcc => (Rgb, "radius=2 points=16 bins=256"),
            DescriptorKind::LbpLcc => (Rgb, "lbp_l + lcc"),
            DescriptorKind::Hog => (Luminance, "cells=3x3 bins=9 unsigned"),
        };
        DescriptorSpec { kind: self, expected_dim: self.dim(), color_space, parameters: params.to_string() }
    }

    /// Runs the extractor and returns the L2-normalized feature.
    pub fn extract(self, img: &ImageBuffer) -> Result<FeatureVector, DescriptorError> {
        match self {
            DescriptorKind::HistL => Ok(hist_l(img)),
            DescriptorKind::HistRgb => Ok(hist_rgb(img)),
            DescriptorKind::Chromaticity => Ok(chromaticity_moments(img)),
            DescriptorKind::GistRgb => gist(img),
            DescriptorKind::GaborL => Ok(gabor(img, ColorSpace::Luminance)),
            DescriptorKind::GaborRgb => Ok(gabor(img, ColorSpace::Rgb)),
            DescriptorKind::LbpL => lbp(img, ColorSpace::Luminance),
            DescriptorKind::LbpRgb => lbp(img, ColorSpace::Rgb),
            DescriptorKind::Lcc => lcc(img),
            DescriptorKind::LbpLcc => lbp_lcc(img),
            DescriptorKind::Hog => Ok(hog(img)),
        }
    }
}

impl fmt::Display for DescriptorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DescriptorKind {
    type Err = DescriptorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = s.trim().to_ascii_lowercase().replace(['-', ' '], "_");
        Self::ALL
            .into_iter()
            .find(|k| k.name() == key)
            .ok_or(DescriptorError::Unsupported(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ColorSpace {
    Luminance,
    Rgb,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DescriptorSpec {
    pub kind: DescriptorKind,
    pub expected_dim: usize,
    pub color_space: ColorSpace,
    pub parameters: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub kind: DescriptorKind,
    pub values: Vec<f64>,
    pub normalized: bool,
}

impl FeatureVector {
    pub fn new(kind: DescriptorKind, values: Vec<f64>) -> Self {
        Self { kind, values, normalized: false }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Divides by the Euclidean norm; the zero vector stays zero and is still flagged normalized.
pub fn l2_normalize(v: FeatureVector) -> Result<FeatureVector, DescriptorError> {
    if v.values.iter().any(|x| !x.is_finite()) {
        return Err(DescriptorError::InvalidInput(format!("non-finite value in {} feature", v.kind)));
    }
    let norm = v.norm();
    let values = if norm > 0.0 { v.values.iter().map(|x| x / norm).collect() } else { v.values };
    Ok(FeatureVector { kind: v.kind, values, normalized: true })
}

fn finish(kind: DescriptorKind, values: Vec<f64>) -> FeatureVector {
    debug_assert_eq!(values.len(), kind.dim());
    l2_normalize(FeatureVector::new(kind, values)).expect("extractors produce finite values")
}

/// Single-channel `f64` raster.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Plane {
    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    fn at_reflect(&self, x: isize, y: isize) -> f64 {
        self.at(imaging::reflect_index(x, self.width), imaging::reflect_index(y, self.height))
    }
}

pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// Grayscale plane `L = 0.299R + 0.587G + 0.114B` evaluated in double precision.
pub fn luminance_plane(img: &ImageBuffer) -> Plane {
    let data = if img.channels() == 1 {
        img.data().iter().map(|&v| v as f64).collect()
    } else {
        img.data()
            .chunks_exact(3)
            .map(|p| LUMA_WEIGHTS[0] * p[0] as f64 + LUMA_WEIGHTS[1] * p[1] as f64 + LUMA_WEIGHTS[2] * p[2] as f64)
            .collect()
    };
    Plane { width: img.width(), height: img.height(), data }
}

/// The three color planes; grayscale input is replicated.
pub fn rgb_planes(img: &ImageBuffer) -> [Plane; 3] {
    let c = img.channels();
    std::array::from_fn(|k| Plane {
        width: img.width(),
        height: img.height(),
        data: img.data().iter().skip(if c == 3 { k } else { 0 }).step_by(c).map(|&v| v as f64).collect(),
    })
}

fn planes(img: &ImageBuffer, space: ColorSpace) -> Vec<Plane> {
    match space {
        ColorSpace::Luminance => vec![luminance_plane(img)],
        ColorSpace::Rgb => rgb_planes(img).into(),
    }
}

fn to_probabilities(counts: &[f64]) -> Vec<f64> {
    let total: f64 = counts.iter().sum();
    if total > 0.0 {
        counts.iter().map(|c| c / total).collect()
    } else {
        counts.to_vec()
    }
}

// ---------------------------------------------------------------------------
// Intensity histograms

/// Intensity bin: `floor(v)` clamped to `[0, 255]`. Values within 1e-6 below an integer
/// count as that integer, which absorbs rounding in the luminance weights.
#[inline]
pub fn intensity_bin(v: f64) -> usize {
    (v + 1e-6).floor().clamp(0.0, 255.0) as usize
}

pub fn hist_counts(p: &Plane) -> Vec<f64> {
    let mut h = vec![0.0; 256];
    for &v in &p.data {
        h[intensity_bin(v)] += 1.0;
    }
    h
}

pub fn hist_l_raw(img: &ImageBuffer) -> Vec<f64> {
    hist_counts(&luminance_plane(img))
}

pub fn hist_rgb_raw(img: &ImageBuffer) -> Vec<f64> {
    rgb_planes(img).iter().flat_map(hist_counts).collect()
}

pub fn hist_l(img: &ImageBuffer) -> FeatureVector {
    finish(DescriptorKind::HistL, to_probabilities(&hist_l_raw(img)))
}

pub fn hist_rgb(img: &ImageBuffer) -> FeatureVector {
    finish(DescriptorKind::HistRgb, to_probabilities(&hist_rgb_raw(img)))
}

// ---------------------------------------------------------------------------
// Chromaticity moments

/// Quantization of each chromaticity axis used to build the chromaticity trace.
pub const CHROMA_LEVELS: usize = 100;
/// Moment orders `(m, n)` for `x^m y^n`.
pub const CHROMA_ORDERS: [(i32, i32); 5] = [(1, 0), (0, 1), (2, 0), (1, 1), (0, 2)];

/// Chromaticity `(R, G) / (R + G + B)`, with black pixels mapped to the white point.
#[inline]
pub fn chromaticity(r: f64, g: f64, b: f64) -> (f64, f64) {
    let s = r + g + b;
    if s <= 0.0 {
        (1.0 / 3.0, 1.0 / 3.0)
    } else {
        (r / s, g / s)
    }
}

/// Five trace moments followed by five distribution moments.
///
/// The trace is the set of occupied chromaticity cells on a 100×100 grid, each cell
/// represented by the mean chromaticity of its pixels; trace moments average `x^m y^n`
/// over occupied cells. Distribution moments average over pixels weighted by
/// intensity `R + G + B` (uniform weights for an all-black image).
pub fn chromaticity_raw(img: &ImageBuffer) -> Vec<f64> {
    let [r, g, b] = rgb_planes(img);
    let q = CHROMA_LEVELS;
    let mut cells: Vec<(f64, f64, f64)> = vec![(0.0, 0.0, 0.0); q * q];
    let mut dist = [0.0; 5];
    let mut wsum = 0.0;
    let mut uniform = [0.0; 5];
    let n = r.data.len();
    for i in 0..n {
        let (x, y) = chromaticity(r.data[i], g.data[i], b.data[i]);
        let cx = ((x * q as f64).floor() as usize).min(q - 1);
        let cy = ((y * q as f64).floor() as usize).min(q - 1);
        let c = &mut cells[cy * q + cx];
        c.0 += x;
        c.1 += y;
        c.2 += 1.0;
        let w = r.data[i] + g.data[i] + b.data[i];
        wsum += w;
        for (k, &(m, e)) in CHROMA_ORDERS.iter().enumerate() {
            let t = x.powi(m) * y.powi(e);
            dist[k] += w * t;
            uniform[k] += t;
        }
    }
    let mut out = vec![0.0; 10];
    let mut occupied = 0.0;
    for &(sx, sy, cnt) in &cells {
        if cnt > 0.0 {
            occupied += 1.0;
            let (x, y) = (sx / cnt, sy / cnt);
            for (k, &(m, e)) in CHROMA_ORDERS.iter().enumerate() {
                out[k] += x.powi(m) * y.powi(e);
            }
        }
    }
    for v in &mut out[..5] {
        *v /= occupied;
    }
    for k in 0..5 {
        out[5 + k] = if wsum > 0.0 { dist[k] / wsum } else { uniform[k] / n as f64 };
    }
    out
}

pub fn chromaticity_moments(img: &ImageBuffer) -> FeatureVector {
    finish(DescriptorKind::Chromaticity, chromaticity_raw(img))
}

// ---------------------------------------------------------------------------
// Local binary patterns and local color contrast

pub const LBP_RADIUS: f64 = 2.0;
pub const LBP_POINTS: usize = 16;
/// Smallest image side for which an interior pixel exists.
pub const LBP_MIN_SIDE: usize = 5;
const UNIFORM_BINS: usize = LBP_POINTS * (LBP_POINTS - 1) + 2;
pub const LBP_BINS: usize = UNIFORM_BINS + 1;

/// Circular 0/1 transitions in a `P`-bit code.
pub fn transitions(code: u32, bits: usize) -> u32 {
    let mask = (1u32 << bits) - 1;
    let rotated = ((code >> 1) | (code << (bits - 1))) & mask;
    (code ^ rotated).count_ones()
}

/// Maps every 16-bit code to its histogram bin: uniform codes in ascending order take
/// bins `0..242`, every other code shares bin 242.
pub fn uniform_lut() -> &'static [u16] {
    use std::sync::OnceLock;
    static LUT: OnceLock<Vec<u16>> = OnceLock::new();
    LUT.get_or_init(|| {
        let mut next = 0u16;
        (0..1u32 << LBP_POINTS)
            .map(|c| {
                if transitions(c, LBP_POINTS) <= 2 {
                    next += 1;
                    next - 1
                } else {
                    UNIFORM_BINS as u16
                }
            })
            .collect()
    })
}

/// Neighbor offsets `(dx, dy)` on the radius-2 circle, counter-clockwise from +x with
/// image y pointing down. Offsets within 1e-9 of an integer are snapped.
pub fn circle_offsets() -> [(f64, f64); LBP_POINTS] {
    let snap = |v: f64| if (v - v.round()).abs() < 1e-9 { v.round() } else { v };
    std::array::from_fn(|p| {
        let a = 2.0 * PI * p as f64 / LBP_POINTS as f64;
        (snap(LBP_RADIUS * a.cos()), snap(-LBP_RADIUS * a.sin()))
    })
}

/// Bilinear read at `(x + dx, y + dy)`; callers keep the footprint inside the plane.
#[inline]
fn bilinear(p: &Plane, x: f64, y: f64) -> f64 {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let (xi, yi) = (x0 as usize, y0 as usize);
    let xj = if fx > 0.0 { xi + 1 } else { xi };
    let yj = if fy > 0.0 { yi + 1 } else { yi };
    let top = p.at(xi, yi) * (1.0 - fx) + p.at(xj, yi) * fx;
    let bot = p.at(xi, yj) * (1.0 - fx) + p.at(xj, yj) * fx;
    top * (1.0 - fy) + bot * fy
}

fn check_lbp_size(w: usize, h: usize) -> Result<(), DescriptorError> {
    if w.min(h) < LBP_MIN_SIDE {
        return Err(DescriptorError::InvalidSize(format!(
            "{w}x{h} image: local patterns need both sides >= {LBP_MIN_SIDE}"
        )));
    }
    Ok(())
}

/// Interior pixel range along an axis of length `n`.
fn interior(n: usize) -> std::ops::Range<usize> {
    let r = LBP_RADIUS as usize;
    r..n - r
}

/// 16-bit pattern of the pixel at `(x, y)`: bit `p` is set when neighbor `p` ≥ center.
pub fn lbp_code(p: &Plane, x: usize, y: usize) -> u32 {
    let c = p.at(x, y);
    let mut code = 0u32;
    for (i, &(dx, dy)) in circle_offsets().iter().enumerate() {
        if bilinear(p, x as f64 + dx, y as f64 + dy) >= c {
            code |= 1 << i;
        }
    }
    code
}

/// 243 bin counts over the interior pixels of one plane.
pub fn lbp_counts(p: &Plane) -> Result<Vec<f64>, DescriptorError> {
    check_lbp_size(p.width, p.height)?;
    let lut = uniform_lut();
    let mut h = vec![0.0; LBP_BINS];
    for y in interior(p.height) {
        for x in interior(p.width) {
            h[lut[lbp_code(p, x, y) as usize] as usize] += 1.0;
        }
    }
    Ok(h)
}

pub fn lbp_raw(img: &ImageBuffer, space: ColorSpace) -> Result<Vec<f64>, DescriptorError> {
    let mut out = Vec::new();
    for p in planes(img, space) {
        out.extend(lbp_counts(&p)?);
    }
    Ok(out)
}

pub fn lbp(img: &ImageBuffer, space: ColorSpace) -> Result<FeatureVector, DescriptorError> {
    let kind = match space {
        ColorSpace::Luminance => DescriptorKind::LbpL,
        ColorSpace::Rgb => DescriptorKind::LbpRgb,
    };
    let mut values = Vec::with_capacity(kind.dim());
    for chunk in lbp_raw(img, space)?.chunks(LBP_BINS) {
        values.extend(to_probabilities(chunk));
    }
    Ok(finish(kind, values))
}

pub const LCC_BINS: usize = 256;

/// Angle between two RGB vectors in `[0, π]`, zero when either vector vanishes.
pub fn color_angle(a: [f64; 3], b: [f64; 3]) -> f64 {
    let na = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
    let nb = (b[0] * b[0] + b[1] * b[1] + b[2] * b[2]).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let cos = (a[0] * b[0] + a[1] * b[1] + a[2] * b[2]) / (na * nb);
    cos.clamp(-1.0, 1.0).acos()
}

/// Bin of an angle on `[0, π/2]` split into 256 equal intervals.
#[inline]
pub fn lcc_bin(angle: f64) -> usize {
    ((angle / (PI / 2.0) * LCC_BINS as f64).floor() as usize).min(LCC_BINS - 1)
}

/// 256 bin counts over interior pixels of the angle between each pixel and the mean
/// color of its 16 circular neighbors.
pub fn lcc_raw(img: &ImageBuffer) -> Result<Vec<f64>, DescriptorError> {
    let planes = rgb_planes(img);
    check_lbp_size(img.width(), img.height())?;
    let offsets = circle_offsets();
    let mut h = vec![0.0; LCC_BINS];
    for y in interior(img.height()) {
        for x in interior(img.width()) {
            let center: [f64; 3] = std::array::from_fn(|c| planes[c].at(x, y));
            let mean: [f64; 3] = std::array::from_fn(|c| {
                offsets.iter().map(|&(dx, dy)| bilinear(&planes[c], x as f64 + dx, y as f64 + dy)).sum::<f64>()
                    / LBP_POINTS as f64
            });
            h[lcc_bin(color_angle(center, mean))] += 1.0;
        }
    }
    Ok(h)
}

pub fn lcc(img: &ImageBuffer) -> Result<FeatureVector, DescriptorError> {
    Ok(finish(DescriptorKind::Lcc, to_probabilities(&lcc_raw(img)?)))
}

/// Luminance LBP probabilities followed by LCC probabilities, normalized jointly.
pub fn lbp_lcc(img: &ImageBuffer) -> Result<FeatureVector, DescriptorError> {
    let mut values = to_probabilities(&lbp_raw(img, ColorSpace::Luminance)?);
    values.extend(to_probabilities(&lcc_raw(img)?));
    Ok(finish(DescriptorKind::LbpLcc, values))
}

// ---------------------------------------------------------------------------
// Histogram of oriented gradients

pub const HOG_CELLS: usize = 3;
pub const HOG_BINS: usize = 9;

/// Cell boundaries `floor(i·n/3)` for `i = 0..=3`.
pub fn cell_bounds(n: usize) -> [usize; HOG_CELLS + 1] {
    std::array::from_fn(|i| i * n / HOG_CELLS)
}

/// Central-difference gradient with symmetric reflection at the border.
pub fn gradient(p: &Plane, x: usize, y: usize) -> (f64, f64) {
    let (xi, yi) = (x as isize, y as isize);
    let gx = p.at_reflect(xi + 1, yi) - p.at_reflect(xi - 1, yi);
    let gy = p.at_reflect(xi, yi + 1) - p.at_reflect(xi, yi - 1);
    (gx, gy)
}

/// Unsigned orientation in `[0, π)`.
pub fn unsigned_orientation(gx: f64, gy: f64) -> f64 {
    let mut a = gy.atan2(gx);
    if a < 0.0 {
        a += PI;
    }
    if a >= PI {
        a -= PI;
    }
    a
}

/// Splits a vote between the two nearest bins; bin `b` is centered at `b·20°` and the
/// axis wraps around.
pub fn orientation_votes(angle: f64) -> [(usize, f64); 2] {
    let pos = angle / (PI / HOG_BINS as f64);
    let lo = pos.floor();
    let frac = pos - lo;
    let b0 = (lo as usize) % HOG_BINS;
    [(b0, 1.0 - frac), ((b0 + 1) % HOG_BINS, frac)]
}

/// 81 magnitude-weighted orientation votes, cell-major in row order.
pub fn hog_raw(img: &ImageBuffer) -> Vec<f64> {
    let p = luminance_plane(img);
    let xb = cell_bounds(p.width);
    let yb = cell_bounds(p.height);
    let mut h = vec![0.0; HOG_CELLS * HOG_CELLS * HOG_BINS];
    for cy in 0..HOG_CELLS {
        for cx in 0..HOG_CELLS {
            let base = (cy * HOG_CELLS + cx) * HOG_BINS;
            for y in yb[cy]..yb[cy + 1] {
                for x in xb[cx]..xb[cx + 1] {
                    let (gx, gy) = gradient(&p, x, y);
                    let mag = (gx * gx + gy * gy).sqrt();
                    if mag == 0.0 {
                        continue;
                    }
                    for (b, w) in orientation_votes(unsigned_orientation(gx, gy)) {
                        h[base + b] += w * mag;
                    }
                }
            }
        }
    }
    h
}

pub fn hog(img: &ImageBuffer) -> FeatureVector {
    finish(DescriptorKind::Hog, hog_raw(img))
}

// ---------------------------------------------------------------------------
// Frequency-domain filter banks (Gabor and GIST)

/// One-sided Gaussian transfer function centered at radial frequency `f` (cycles per
/// pixel) along orientation `theta`, with zero response at DC.
#[derive(Clone, Copy, Debug)]
pub struct BandFilter {
    pub frequency: f64,
    pub theta: f64,
    pub sigma_radial: f64,
    pub sigma_angular: f64,
}

impl BandFilter {
    fn response(&self, u: f64, v: f64) -> f64 {
        if u == 0.0 && v == 0.0 {
            return 0.0;
        }
        let (s, c) = self.theta.sin_cos();
        let along = u * c + v * s;
        let across = -u * s + v * c;
        let a = (along - self.frequency) / self.sigma_radial;
        let b = across / self.sigma_angular;
        (-0.5 * (a * a + b * b)).exp()
    }
}

#[inline]
fn fft_freq(k: usize, n: usize) -> f64 {
    if 2 * k < n {
        k as f64 / n as f64
    } else {
        k as f64 / n as f64 - 1.0
    }
}

/// 2-D FFT helper with cached plans.
struct Fft2 {
    w: usize,
    h: usize,
    row: Arc<dyn rustfft::Fft<f64>>,
    col: Arc<dyn rustfft::Fft<f64>>,
    row_inv: Arc<dyn rustfft::Fft<f64>>,
    col_inv: Arc<dyn rustfft::Fft<f64>>,
}

impl Fft2 {
    fn new(w: usize, h: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            w,
            h,
            row: planner.plan_fft_forward(w),
            col: planner.plan_fft_forward(h),
            row_inv: planner.plan_fft_inverse(w),
            col_inv: planner.plan_fft_inverse(h),
        }
    }

    fn transform(&self, data: &mut [Complex64], inverse: bool) {
        let (row, col) = if inverse { (&self.row_inv, &self.col_inv) } else { (&self.row, &self.col) };
        for r in data.chunks_exact_mut(self.w) {
            row.process(r);
        }
        let mut column = vec![Complex64::new(0.0, 0.0); self.h];
        for x in 0..self.w {
            for y in 0..self.h {
                column[y] = data[y * self.w + x];
            }
            col.process(&mut column);
            for y in 0..self.h {
                data[y * self.w + x] = column[y];
            }
        }
        if inverse {
            let scale = 1.0 / (self.w * self.h) as f64;
            for v in data.iter_mut() {
                *v *= scale;
            }
        }
    }

    /// Spectrum of a mean-removed plane.
    fn spectrum(&self, p: &Plane) -> Vec<Complex64> {
        let mean = p.data.iter().sum::<f64>() / p.data.len() as f64;
        let mut data: Vec<Complex64> = p.data.iter().map(|&v| Complex64::new(v - mean, 0.0)).collect();
        self.transform(&mut data, false);
        data
    }

    /// Magnitude of the filtered signal at every pixel.
    fn magnitude(&self, spectrum: &[Complex64], filter: &BandFilter) -> Vec<f64> {
        let mut data = spectrum.to_vec();
        for ky in 0..self.h {
            let v = fft_freq(ky, self.h);
            for kx in 0..self.w {
                let u = fft_freq(kx, self.w);
                data[ky * self.w + kx] *= filter.response(u, v);
            }
        }
        self.transform(&mut data, true);
        data.iter().map(|c| c.norm()).collect()
    }
}

pub const GABOR_ORIENTATIONS: usize = 6;
pub const GABOR_FREQUENCIES: [f64; 4] = [0.05, 0.1, 0.2, 0.4];
/// Orientation groups after alignment: the dominant direction, then the symmetric pairs
/// at ±30° and ±60°, then the orthogonal direction.
pub const GABOR_GROUPS: [&[usize]; 4] = [&[0], &[1, 5], &[2, 4], &[3]];

pub fn gabor_bank() -> Vec<Vec<BandFilter>> {
    GABOR_FREQUENCIES
        .iter()
        .map(|&f| {
            (0..GABOR_ORIENTATIONS)
                .map(|o| BandFilter {
                    frequency: f,
                    theta: o as f64 * PI / GABOR_ORIENTATIONS as f64,
                    sigma_radial: 0.3 * f,
                    sigma_angular: f * (PI / (2.0 * GABOR_ORIENTATIONS as f64)).tan(),
                })
                .collect()
        })
        .collect()
}

/// Mean and standard deviation of the magnitude response for every
/// (frequency, orientation) pair of one plane, indexed `[f][o]`.
pub fn gabor_statistics(p: &Plane) -> Vec<Vec<(f64, f64)>> {
    let fft = Fft2::new(p.width, p.height);
    let spec = fft.spectrum(p);
    gabor_bank()
        .iter()
        .map(|row| {
            row.iter()
                .map(|filter| {
                    let mag = fft.magnitude(&spec, filter);
                    let n = mag.len() as f64;
                    let mean = mag.iter().sum::<f64>() / n;
                    let var = mag.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>() / n;
                    (mean, var.sqrt())
                })
                .collect()
        })
        .collect()
}

/// 32 rotation-normalized values: the orientation axis is shifted so the orientation
/// with the largest summed mean response comes first, symmetric orientation pairs are
/// averaged into four groups, and (mean, std) is emitted per frequency and group.
pub fn gabor_reduce(stats: &[Vec<(f64, f64)>]) -> Vec<f64> {
    let energy = |o: usize| stats.iter().map(|row| row[o].0).sum::<f64>();
    let mut dominant = 0;
    for o in 1..GABOR_ORIENTATIONS {
        if energy(o) > energy(dominant) {
            dominant = o;
        }
    }
    let mut out = Vec::with_capacity(32);
    for row in stats {
        for group in GABOR_GROUPS {
            let k = group.len() as f64;
            let (m, s) = group.iter().fold((0.0, 0.0), |(m, s), &g| {
                let (gm, gs) = row[(dominant + g) % GABOR_ORIENTATIONS];
                (m + gm, s + gs)
            });
            out.push(m / k);
            out.push(s / k);
        }
    }
    out
}

pub fn gabor_raw(img: &ImageBuffer, space: ColorSpace) -> Vec<f64> {
    planes(img, space).iter().flat_map(|p| gabor_reduce(&gabor_statistics(p))).collect()
}

pub fn gabor(img: &ImageBuffer, space: ColorSpace) -> FeatureVector {
    let kind = match space {
        ColorSpace::Luminance => DescriptorKind::GaborL,
        ColorSpace::Rgb => DescriptorKind::GaborRgb,
    };
    finish(kind, gabor_raw(img, space))
}

pub const GIST_SIZE: usize = 128;
pub const GIST_ORIENTATIONS: usize = 8;
pub const GIST_SCALES: [f64; 4] = [0.3, 0.15, 0.075, 0.0375];
pub const GIST_GRID: usize = 4;

pub fn gist_bank() -> Vec<Vec<BandFilter>> {
    GIST_SCALES
        .iter()
        .map(|&f| {
            (0..GIST_ORIENTATIONS)
                .map(|o| BandFilter {
                    frequency: f,
                    theta: o as f64 * PI / GIST_ORIENTATIONS as f64,
                    sigma_radial: 0.35 * f,
                    sigma_angular: f * (PI / (2.0 * GIST_ORIENTATIONS as f64)).tan(),
                })
                .collect()
        })
        .collect()
}

/// 512 values ordered (scale, orientation, grid row, grid column). Images that are not
/// already 128×128 are resized; channel magnitudes are averaged before pooling.
pub fn gist_raw(img: &ImageBuffer) -> Result<Vec<f64>, DescriptorError> {
    let resized;
    let img = if img.width() == GIST_SIZE && img.height() == GIST_SIZE {
        img
    } else {
        resized = imaging::resize(img, GIST_SIZE, GIST_SIZE).map_err(|e| DescriptorError::InvalidInput(e.to_string()))?;
        &resized
    };
    let planes = rgb_planes(img);
    let fft = Fft2::new(GIST_SIZE, GIST_SIZE);
    let spectra: Vec<_> = planes.iter().map(|p| fft.spectrum(p)).collect();
    let bounds = cell_bounds_n(GIST_SIZE, GIST_GRID);
    let mut out = Vec::with_capacity(512);
    for row in gist_bank() {
        for filter in &row {
            let mut mag = vec![0.0; GIST_SIZE * GIST_SIZE];
            for s in &spectra {
                for (m, v) in mag.iter_mut().zip(fft.magnitude(s, filter)) {
                    *m += v / 3.0;
                }
            }
            for gy in 0..GIST_GRID {
                for gx in 0..GIST_GRID {
                    let mut sum = 0.0;
                    for y in bounds[gy]..bounds[gy + 1] {
                        for x in bounds[gx]..bounds[gx + 1] {
                            sum += mag[y * GIST_SIZE + x];
                        }
                    }
                    let area = (bounds[gy + 1] - bounds[gy]) * (bounds[gx + 1] - bounds[gx]);
                    out.push(sum / area as f64);
                }
            }
        }
    }
    Ok(out)
}

fn cell_bounds_n(n: usize, cells: usize) -> Vec<usize> {
    (0..=cells).map(|i| i * n / cells).collect()
}

pub fn gist(img: &ImageBuffer) -> Result<FeatureVector, DescriptorError> {
    Ok(finish(DescriptorKind::GistRgb, gist_raw(img)?))
}

// ---------------------------------------------------------------------------
// Text records

pub const FEATURE_FILE_HEADER: &str = "pictor-features 1";

/// Writes the versioned header followed by one `kind dim v1 v2 …` line per feature.
/// Values use the shortest representation that parses back to the same `f64`.
pub fn write_records<'a>(
    mut out: impl Write,
    records: impl IntoIterator<Item = &'a FeatureVector>,
) -> Result<(), DescriptorError> {
    writeln!(out, "{FEATURE_FILE_HEADER}")?;
    for r in records {
        write!(out, "{} {}", r.kind, r.dim())?;
        for v in &r.values {
            write!(out, " {v}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Parses a file produced by [`write_records`]; records read back as normalized.
pub fn read_records(input: impl BufRead) -> Result<Vec<FeatureVector>, DescriptorError> {
    let mut lines = input.lines();
    let header = lines.next().transpose()?.unwrap_or_default();
    if header.trim() != FEATURE_FILE_HEADER {
        return Err(DescriptorError::Parse { line: 1, msg: format!("expected `{FEATURE_FILE_HEADER}` header") });
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        let lineno = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| DescriptorError::Parse { line: lineno, msg };
        let mut tok = line.split_ascii_whitespace();
        let kind: DescriptorKind = tok.next().unwrap_or_default().parse().map_err(|e: DescriptorError| err(e.to_string()))?;
        let dim: usize = tok.next().and_then(|d| d.parse().ok()).ok_or_else(|| err("missing dimension".into()))?;
        let values = tok.map(|t| t.parse::<f64>().map_err(|e| err(e.to_string()))).collect::<Result<Vec<_>, _>>()?;
        if values.len() != dim || dim != kind.dim() {
            return Err(err(format!("{kind} record declares {dim} values, has {}, expects {}", values.len(), kind.dim())));
        }
        out.push(FeatureVector { kind, values, normalized: true });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(w: usize, h: usize, seed: u64) -> ImageBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageBuffer::from_fn(w, h, 3, |_, _, _| rng.random_range(0.0..255.0)).unwrap()
    }

    fn nonzero(v: &[f64]) -> usize {
        v.iter().filter(|&&x| x != 0.0).count()
    }

    #[test]
    fn dimensions_match_contract() {
        let img = noise(20, 17, 1);
        for kind in DescriptorKind::ALL {
            let f = kind.extract(&img).unwrap();
            assert_eq!(f.dim(), kind.dim(), "{kind}");
            assert!((f.norm() - 1.0).abs() < 1e-6, "{kind}");
        }
    }

    #[test]
    fn l2_edge_cases() {
        let v = l2_normalize(FeatureVector::new(DescriptorKind::HistL, vec![3.0, 4.0])).unwrap();
        assert_eq!(v.values, vec![0.6, 0.8]);
        let z = l2_normalize(FeatureVector::new(DescriptorKind::HistL, vec![0.0; 3])).unwrap();
        assert!(z.normalized && z.values.iter().all(|&x| x == 0.0));
        let again = l2_normalize(v.clone()).unwrap();
        for (a, b) in again.values.iter().zip(&v.values) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!(l2_normalize(FeatureVector::new(DescriptorKind::HistL, vec![f64::NAN])).is_err());
    }

    #[test]
    fn histogram_examples() {
        let h = hist_l(&ImageBuffer::filled(6, 6, &[128.0]).unwrap());
        assert_eq!(h.values[128], 1.0);
        assert_eq!(nonzero(&h.values), 1);
        let two = ImageBuffer::from_fn(4, 4, 3, |x, _, _| if x < 2 { 0.0 } else { 255.0 }).unwrap();
        let h = hist_l(&two);
        assert!((h.values[0] - 0.5f64.sqrt()).abs() < 1e-12);
        assert!((h.values[255] - 0.5f64.sqrt()).abs() < 1e-12);
        let c = hist_rgb(&ImageBuffer::filled(5, 5, &[10.0, 20.0, 30.0]).unwrap());
        assert_eq!(nonzero(&c.values), 3);
        let gray = ImageBuffer::from_fn(5, 5, 3, |x, y, _| (x * 40 + y) as f32).unwrap();
        let c = hist_rgb(&gray);
        assert_eq!(c.values[..256], c.values[256..512]);
        assert_eq!(c.values[..256], c.values[512..]);
    }

    #[test]
    fn chromaticity_point_masses() {
        let raw = chromaticity_raw(&ImageBuffer::filled(4, 4, &[90.0, 90.0, 90.0]).unwrap());
        for (k, &(m, n)) in CHROMA_ORDERS.iter().enumerate() {
            let expect = (1.0f64 / 3.0).powi(m + n);
            assert!((raw[k] - expect).abs() < 1e-12);
            assert!((raw[5 + k] - expect).abs() < 1e-12);
        }
        let red = chromaticity_raw(&ImageBuffer::filled(4, 4, &[200.0, 0.0, 0.0]).unwrap());
        assert_eq!(red, vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
        // black maps to the white point
        let black = chromaticity_raw(&ImageBuffer::filled(3, 3, &[0.0; 3]).unwrap());
        assert!((black[0] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn uniform_census() {
        let lut = uniform_lut();
        let uniform = (0..1u32 << 16).filter(|&c| transitions(c, 16) <= 2).count();
        assert_eq!(uniform, 242);
        assert_eq!(*lut.iter().max().unwrap() as usize + 1, LBP_BINS);
        assert_eq!(lut[0], 0);
        assert_eq!(lut[0xFFFF] as usize, 241);
    }

    #[test]
    fn circle_offsets_snap_axes() {
        let o = circle_offsets();
        assert_eq!(o[0], (2.0, 0.0));
        assert_eq!(o[4], (0.0, -2.0));
        assert_eq!(o[8], (-2.0, 0.0));
        assert_eq!(o[12], (0.0, 2.0));
    }

    #[test]
    fn lbp_constant_and_size() {
        let f = lbp(&ImageBuffer::filled(9, 7, &[50.0, 60.0, 70.0]).unwrap(), ColorSpace::Luminance).unwrap();
        assert_eq!(nonzero(&f.values), 1);
        assert_eq!(f.values[uniform_lut()[0xFFFF] as usize], 1.0);
        assert!(lbp(&noise(4, 10, 0), ColorSpace::Luminance).is_err());
        let raw = lbp_raw(&noise(5, 5, 0), ColorSpace::Rgb).unwrap();
        assert_eq!(raw.len(), 729);
        assert_eq!(raw.iter().sum::<f64>(), 3.0);
    }

    #[test]
    fn lcc_collinear_cases() {
        let f = lcc(&ImageBuffer::filled(8, 8, &[10.0, 200.0, 30.0]).unwrap()).unwrap();
        assert_eq!(f.values[0], 1.0);
        let gray = ImageBuffer::from_fn(9, 9, 3, |x, y, _| ((x * 31 + y * 17) % 256) as f32).unwrap();
        assert_eq!(lcc(&gray).unwrap().values[0], 1.0);
        let both = lbp_lcc(&ImageBuffer::filled(8, 8, &[1.0, 2.0, 3.0]).unwrap()).unwrap();
        assert_eq!(nonzero(&both.values), 2);
        assert_eq!(both.dim(), 499);
    }

    #[test]
    fn hog_vertical_edge_votes_one_bin() {
        assert_eq!(nonzero(&hog(&ImageBuffer::filled(12, 12, &[80.0]).unwrap()).values), 0);
        let edge = ImageBuffer::from_fn(12, 12, 1, |x, _, _| if x < 5 { 0.0 } else { 255.0 }).unwrap();
        let raw = hog_raw(&edge);
        for cell in raw.chunks(HOG_BINS) {
            assert!(cell[1..].iter().all(|&v| v == 0.0));
        }
        assert!(raw.chunks(HOG_BINS).filter(|c| c[0] > 0.0).count() == 3);
    }

    #[test]
    fn orientation_votes_wrap() {
        let v = orientation_votes(170f64.to_radians());
        assert_eq!(v[0].0, 8);
        assert_eq!(v[1].0, 0);
        assert!((v[0].1 - 0.5).abs() < 1e-9);
        let v = orientation_votes(0.0);
        assert_eq!(v[0], (0, 1.0));
    }

    /// Oriented cosine under a centered Gaussian window, so rotating it does not change
    /// the leakage at the image border.
    fn sinusoid(size: usize, freq: f64, theta: f64) -> ImageBuffer {
        let c = (size as f64 - 1.0) / 2.0;
        let sigma = size as f64 / 6.0;
        ImageBuffer::from_fn(size, size, 1, |x, y, _| {
            let (dx, dy) = (x as f64 - c, y as f64 - c);
            let t = (dx * theta.cos() + dy * theta.sin()) * freq * 2.0 * PI;
            let w = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            (127.5 + 100.0 * w * t.cos()) as f32
        })
        .unwrap()
    }

    #[test]
    fn gabor_is_dc_free() {
        let f = gabor(&ImageBuffer::filled(16, 16, &[77.0, 1.0, 200.0]).unwrap(), ColorSpace::Rgb);
        assert_eq!(f.dim(), 96);
        assert!(f.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gabor_alignment_absorbs_rotation() {
        let a = gabor(&sinusoid(128, 0.1, 3.0 * PI / 6.0), ColorSpace::Luminance);
        let b = gabor(&sinusoid(128, 0.1, 4.0 * PI / 6.0), ColorSpace::Luminance);
        let diff = a.values.iter().zip(&b.values).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        assert!(diff < 5e-2, "relative difference {diff}");
    }

    #[test]
    fn gabor_energy_lands_on_matching_frequency() {
        let raw = gabor_raw(&sinusoid(128, GABOR_FREQUENCIES[2], PI / 2.0), ColorSpace::Luminance);
        // means of the dominant group for each frequency
        let dominant: Vec<f64> = (0..4).map(|f| raw[f * 8]).collect();
        let best = (0..4).max_by(|&i, &j| dominant[i].total_cmp(&dominant[j])).unwrap();
        assert_eq!(best, 2);
    }

    #[test]
    fn gist_bands_are_translation_symmetric() {
        let img = ImageBuffer::from_fn(GIST_SIZE, GIST_SIZE, 3, |_, y, _| {
            (127.0 + 90.0 * (2.0 * PI * 8.0 * y as f64 / GIST_SIZE as f64).sin()) as f32
        })
        .unwrap();
        let raw = gist_raw(&img).unwrap();
        assert_eq!(raw.len(), 512);
        for filter in raw.chunks(16) {
            for row in filter.chunks(4) {
                for v in row {
                    assert!((v - row[0]).abs() <= 1e-9 * row[0].abs().max(1.0));
                }
            }
        }
        assert!(gist(&ImageBuffer::filled(40, 30, &[9.0, 9.0, 9.0]).unwrap()).unwrap().values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn record_round_trip() {
        let feats = vec![hog(&noise(10, 10, 3)), chromaticity_moments(&noise(6, 6, 4))];
        let mut buf = Vec::new();
        write_records(&mut buf, &feats).unwrap();
        let back = read_records(&buf[..]).unwrap();
        assert_eq!(back, feats);
        assert!(read_records(&b"pictor-features 1\nhog 3 1 2 3\n"[..]).is_err());
        assert!(matches!("cedd".parse::<DescriptorKind>(), Err(DescriptorError::Unsupported(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn histograms_ignore_pixel_order(seed in any::<u64>(), w in 5usize..12, h in 5usize..12) {
            let img = noise(w, h, seed);
            let mut px: Vec<Vec<f32>> = img.data().chunks(3).map(|p| p.to_vec()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 7);
            for i in (1..px.len()).rev() {
                px.swap(i, rng.random_range(0..=i));
            }
            let shuffled = ImageBuffer::new(w, h, 3, px.concat()).unwrap();
            prop_assert_eq!(hist_l_raw(&img), hist_l_raw(&shuffled));
            prop_assert_eq!(hist_rgb_raw(&img), hist_rgb_raw(&shuffled));
            let a = chromaticity_raw(&img);
            let b = chromaticity_raw(&shuffled);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn outputs_are_unit_or_zero(seed in any::<u64>(), w in 5usize..14, h in 5usize..14) {
            let img = noise(w, h, seed);
            for kind in [DescriptorKind::HistL, DescriptorKind::LbpRgb, DescriptorKind::Hog, DescriptorKind::LbpLcc] {
                let f = kind.extract(&img).unwrap();
                let n = f.norm();
                prop_assert!(n == 0.0 || (n - 1.0).abs() < 1e-6);
                let again = l2_normalize(f.clone()).unwrap();
                for (a, b) in again.values.iter().zip(&f.values) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }
}
