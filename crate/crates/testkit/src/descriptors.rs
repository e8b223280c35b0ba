//! Naive per-pixel descriptor oracles returning raw (unnormalized) values.
//!
//! Conventions shared with the library: luminance `0.299R + 0.587G + 0.114B`; intensity
//! bins `floor(v + 1e-6)` clamped to 255; local patterns on interior pixels of a radius-2,
//! 16-point circle with y pointing down; HOG cells split at `floor(i·n/3)`.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use pictor::imaging::ImageBuffer;

fn rgb(img: &ImageBuffer, x: usize, y: usize) -> [f64; 3] {
    let p = img.pixel(x, y);
    if p.len() == 1 {
        [p[0] as f64; 3]
    } else {
        [p[0] as f64, p[1] as f64, p[2] as f64]
    }
}

fn luma(img: &ImageBuffer, x: usize, y: usize) -> f64 {
    let p = img.pixel(x, y);
    if p.len() == 1 {
        return p[0] as f64;
    }
    0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64
}

fn bin256(v: f64) -> usize {
    let b = (v + 1e-6).floor();
    if b < 0.0 {
        0
    } else if b > 255.0 {
        255
    } else {
        b as usize
    }
}

/// Row-major grid of one scalar per pixel.
struct Grid {
    w: usize,
    h: usize,
    v: Vec<f64>,
}

impl Grid {
    fn from_fn(img: &ImageBuffer, f: impl Fn(&ImageBuffer, usize, usize) -> f64) -> Self {
        let (w, h) = (img.width(), img.height());
        let mut v = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                v.push(f(img, x, y));
            }
        }
        Self { w, h, v }
    }

    fn get(&self, x: usize, y: usize) -> f64 {
        self.v[y * self.w + x]
    }

    /// Bilinear read at a point whose 2×2 footprint lies inside the grid.
    fn sample(&self, x: f64, y: f64) -> f64 {
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let x1 = (x0 + 1).min(self.w - 1);
        let y1 = (y0 + 1).min(self.h - 1);
        let top = self.get(x0, y0) * (1.0 - fx) + self.get(x1, y0) * fx;
        let bottom = self.get(x0, y1) * (1.0 - fx) + self.get(x1, y1) * fx;
        top * (1.0 - fy) + bottom * fy
    }
}

pub fn hist_l(img: &ImageBuffer) -> Vec<f64> {
    let mut h = vec![0.0; 256];
    for y in 0..img.height() {
        for x in 0..img.width() {
            h[bin256(luma(img, x, y))] += 1.0;
        }
    }
    h
}

pub fn hist_rgb(img: &ImageBuffer) -> Vec<f64> {
    let mut h = vec![0.0; 768];
    for y in 0..img.height() {
        for x in 0..img.width() {
            let c = rgb(img, x, y);
            for k in 0..3 {
                h[256 * k + bin256(c[k])] += 1.0;
            }
        }
    }
    h
}

/// Trace moments over occupied cells of a 100×100 chromaticity grid (cell value = mean
/// chromaticity of its pixels), then intensity-weighted pixel moments.
pub fn chromaticity(img: &ImageBuffer) -> Vec<f64> {
    let orders = [(1, 0), (0, 1), (2, 0), (1, 1), (0, 2)];
    let mut cells: BTreeMap<(usize, usize), Vec<(f64, f64)>> = BTreeMap::new();
    let mut pixels = Vec::new();
    for y in 0..img.height() {
        for x in 0..img.width() {
            let [r, g, b] = rgb(img, x, y);
            let s = r + g + b;
            let (cx, cy) = if s > 0.0 { (r / s, g / s) } else { (1.0 / 3.0, 1.0 / 3.0) };
            let i = ((cx * 100.0).floor() as usize).min(99);
            let j = ((cy * 100.0).floor() as usize).min(99);
            cells.entry((i, j)).or_default().push((cx, cy));
            pixels.push((cx, cy, s));
        }
    }
    let mut out = Vec::with_capacity(10);
    for &(m, n) in &orders {
        let mut acc = 0.0;
        for members in cells.values() {
            let mx = members.iter().map(|p| p.0).sum::<f64>() / members.len() as f64;
            let my = members.iter().map(|p| p.1).sum::<f64>() / members.len() as f64;
            acc += mx.powi(m) * my.powi(n);
        }
        out.push(acc / cells.len() as f64);
    }
    let total: f64 = pixels.iter().map(|p| p.2).sum();
    for &(m, n) in &orders {
        let v = if total > 0.0 {
            pixels.iter().map(|p| p.2 * p.0.powi(m) * p.1.powi(n)).sum::<f64>() / total
        } else {
            pixels.iter().map(|p| p.0.powi(m) * p.1.powi(n)).sum::<f64>() / pixels.len() as f64
        };
        out.push(v);
    }
    out
}

/// Sixteen points at 22.5° steps on a radius-2 circle, counter-clockwise from +x with
/// image y down. Points on the axes sit exactly on pixel centers.
pub fn circle() -> Vec<(f64, f64)> {
    (0..16)
        .map(|p| match p {
            0 => (2.0, 0.0),
            4 => (0.0, -2.0),
            8 => (-2.0, 0.0),
            12 => (0.0, 2.0),
            _ => {
                let a = (22.5 * p as f64).to_radians();
                (2.0 * a.cos(), -2.0 * a.sin())
            }
        })
        .collect()
}

fn circular_transitions(code: u32) -> u32 {
    (0..16).filter(|&i| (code >> i) & 1 != (code >> ((i + 1) % 16)) & 1).count() as u32
}

/// All 16-bit codes with at most two circular 0/1 transitions, ascending.
pub fn uniform_codes() -> Vec<u32> {
    (0..1u32 << 16).filter(|&c| circular_transitions(c) <= 2).collect()
}

fn lbp_plane(grid: &Grid, uniform: &[u32]) -> Vec<f64> {
    let pts = circle();
    let mut h = vec![0.0; uniform.len() + 1];
    for y in 2..grid.h - 2 {
        for x in 2..grid.w - 2 {
            let c = grid.get(x, y);
            let mut code = 0u32;
            for (p, &(dx, dy)) in pts.iter().enumerate() {
                if grid.sample(x as f64 + dx, y as f64 + dy) >= c {
                    code |= 1 << p;
                }
            }
            let bin = uniform.binary_search(&code).unwrap_or(uniform.len());
            h[bin] += 1.0;
        }
    }
    h
}

/// Uniform-pattern LBP counts on the luminance plane (243 values).
pub fn lbp_l(img: &ImageBuffer) -> Vec<f64> {
    lbp_plane(&Grid::from_fn(img, luma), &uniform_codes())
}

/// Uniform-pattern LBP counts per color channel, R then G then B (729 values).
pub fn lbp_rgb(img: &ImageBuffer) -> Vec<f64> {
    let uniform = uniform_codes();
    (0..3).flat_map(|k| lbp_plane(&Grid::from_fn(img, |im, x, y| rgb(im, x, y)[k]), &uniform)).collect()
}

/// Counts of the angle between each interior pixel's color and the mean color of its
/// 16 circle samples, 256 bins over `[0, π/2]`.
pub fn lcc(img: &ImageBuffer) -> Vec<f64> {
    let grids: Vec<Grid> = (0..3).map(|k| Grid::from_fn(img, |im, x, y| rgb(im, x, y)[k])).collect();
    let pts = circle();
    let (w, h) = (img.width(), img.height());
    let mut hist = vec![0.0; 256];
    for y in 2..h - 2 {
        for x in 2..w - 2 {
            let a: Vec<f64> = grids.iter().map(|g| g.get(x, y)).collect();
            let b: Vec<f64> = grids
                .iter()
                .map(|g| pts.iter().map(|&(dx, dy)| g.sample(x as f64 + dx, y as f64 + dy)).sum::<f64>() / 16.0)
                .collect();
            let na = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
            let nb = (b[0] * b[0] + b[1] * b[1] + b[2] * b[2]).sqrt();
            let angle = if na == 0.0 || nb == 0.0 {
                0.0
            } else {
                ((a[0] * b[0] + a[1] * b[1] + a[2] * b[2]) / (na * nb)).clamp(-1.0, 1.0).acos()
            };
            let bin = ((angle / (PI / 2.0) * 256.0).floor() as usize).min(255);
            hist[bin] += 1.0;
        }
    }
    hist
}

/// LBP-L counts followed by LCC counts (499 values).
pub fn lbp_lcc(img: &ImageBuffer) -> Vec<f64> {
    let mut v = lbp_l(img);
    v.extend(lcc(img));
    v
}

/// Cell `c` starts at `floor(c·n/3)`.
fn cell_of(i: usize, n: usize) -> usize {
    (0..3).rev().find(|&c| c * n / 3 <= i).unwrap_or(0)
}

/// 3×3 cells × 9 unsigned orientation bins (centers at 0°, 20°, …, 160°, wrapping),
/// votes split linearly between the two nearest bins and weighted by gradient magnitude.
/// Gradients are central differences with the border pixel repeated.
pub fn hog(img: &ImageBuffer) -> Vec<f64> {
    let g = Grid::from_fn(img, luma);
    let (w, h) = (g.w, g.h);
    let mut out = vec![0.0; 81];
    for y in 0..h {
        for x in 0..w {
            let gx = g.get((x + 1).min(w - 1), y) - g.get(x.saturating_sub(1), y);
            let gy = g.get(x, (y + 1).min(h - 1)) - g.get(x, y.saturating_sub(1));
            let mag = gx.hypot(gy);
            if mag == 0.0 {
                continue;
            }
            let mut deg = gy.atan2(gx).to_degrees();
            if deg < 0.0 {
                deg += 180.0;
            }
            if deg >= 180.0 {
                deg -= 180.0;
            }
            let pos = deg / 20.0;
            let lo = pos.floor();
            let frac = pos - lo;
            let b0 = lo as usize % 9;
            let b1 = (b0 + 1) % 9;
            let cell = cell_of(y, h) * 3 + cell_of(x, w);
            out[cell * 9 + b0] += mag * (1.0 - frac);
            out[cell * 9 + b1] += mag * frac;
        }
    }
    out
}
