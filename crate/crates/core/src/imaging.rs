//! Raster images, color conversion, resampling and training-time augmentation.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("invalid image: {0}")]
    Invalid(String),
    #[error("expected {expected} channel(s), got {got}")]
    Channels { expected: usize, got: usize },
    #[error("augmentation config: {0}")]
    Config(String),
    #[error("decode error: {0}")]
    Decode(#[from] image::ImageError),
}

/// Channels-last float raster with intensities nominally in `[0, 255]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self, ImageError> {
        if width == 0 || height == 0 {
            return Err(ImageError::Invalid(format!("degenerate size {width}x{height}")));
        }
        if channels != 1 && channels != 3 {
            return Err(ImageError::Invalid(format!("unsupported channel count {channels}")));
        }
        if data.len() != width * height * channels {
            return Err(ImageError::Invalid(format!(
                "{}x{}x{} image needs {} values, got {}",
                width,
                height,
                channels,
                width * height * channels,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(ImageError::Invalid("non-finite pixel value".into()));
        }
        Ok(Self { width, height, channels, data })
    }

    pub fn filled(width: usize, height: usize, pixel: &[f32]) -> Result<Self, ImageError> {
        let data = pixel.iter().copied().cycle().take(width * height * pixel.len()).collect();
        Self::new(width, height, pixel.len(), data)
    }

    /// Builds an image by evaluating `f(x, y, channel)` for every sample.
    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self, ImageError> {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Self::new(width, height, channels, data)
    }

    pub fn from_dynamic(img: &image::DynamicImage) -> Self {
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        let data = rgb.into_raw().into_iter().map(f32::from).collect();
        Self { width: w as usize, height: h as usize, channels: 3, data }
    }

    pub fn open(path: &Path) -> Result<Self, ImageError> {
        let img = image::open(path)?;
        let out = Self::from_dynamic(&img);
        if out.width == 0 || out.height == 0 {
            return Err(ImageError::Invalid(format!("{} decodes to an empty image", path.display())));
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ImageError> {
        let img = image::load_from_memory(bytes)?;
        let out = Self::from_dynamic(&img);
        if out.width == 0 || out.height == 0 {
            return Err(ImageError::Invalid("empty image".into()));
        }
        Ok(out)
    }

    /// 8-bit RGB copy (grayscale is replicated), rounding and clamping.
    pub fn to_rgb8(&self) -> image::RgbImage {
        let mut buf = Vec::with_capacity(self.width * self.height * 3);
        for px in self.data.chunks_exact(self.channels) {
            for c in 0..3 {
                let v = px[if self.channels == 3 { c } else { 0 }];
                buf.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
        image::RgbImage::from_raw(self.width as u32, self.height as u32, buf).expect("sized buffer")
    }

    pub fn save(&self, path: &Path) -> Result<(), ImageError> {
        self.to_rgb8().save(path)?;
        Ok(())
    }

    /// PNG-encoded 8-bit RGB bytes.
    pub fn to_png(&self) -> Result<Vec<u8>, ImageError> {
        let mut out = std::io::Cursor::new(Vec::new());
        self.to_rgb8().write_to(&mut out, image::ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn min_side(&self) -> usize {
        self.width.min(self.height)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    /// Single channel as its own image.
    pub fn channel(&self, c: usize) -> ImageBuffer {
        let data = self.data.iter().skip(c).step_by(self.channels).copied().collect();
        ImageBuffer { width: self.width, height: self.height, channels: 1, data }
    }

    /// Copies the `w×h` window with top-left corner `(x, y)`.
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<ImageBuffer, ImageError> {
        if w == 0 || h == 0 || x + w > self.width || y + h > self.height {
            return Err(ImageError::Invalid(format!(
                "crop {w}x{h}+{x}+{y} outside {}x{}",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(w * h * self.channels);
        for row in y..y + h {
            let start = (row * self.width + x) * self.channels;
            data.extend_from_slice(&self.data[start..start + w * self.channels]);
        }
        Ok(ImageBuffer { width: w, height: h, channels: self.channels, data })
    }

    fn map(&self, f: impl Fn(f32) -> f32) -> ImageBuffer {
        ImageBuffer { width: self.width, height: self.height, channels: self.channels, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    fn clamped(mut self) -> ImageBuffer {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 255.0));
        self
    }
}

const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

#[inline]
pub fn luma(r: f32, g: f32, b: f32) -> f32 {
    LUMA[0] * r + LUMA[1] * g + LUMA[2] * b
}

/// `L = 0.299R + 0.587G + 0.114B` per pixel.
pub fn to_grayscale(img: &ImageBuffer) -> Result<ImageBuffer, ImageError> {
    if img.channels != 3 {
        return Err(ImageError::Channels { expected: 3, got: img.channels });
    }
    let data = img.data.chunks_exact(3).map(|p| luma(p[0], p[1], p[2])).collect();
    Ok(ImageBuffer { width: img.width, height: img.height, channels: 1, data })
}

/// Grayscale view of any image: converts RGB, passes single-channel images through.
pub fn luminance(img: &ImageBuffer) -> ImageBuffer {
    if img.channels == 1 {
        img.clone()
    } else {
        to_grayscale(img).expect("3-channel")
    }
}

/// Index into `[0, n)` with symmetric (edge-repeating) reflection, for any offset.
#[inline]
pub fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

/// Bilinear resampling to an exact size using half-pixel-centered coordinates.
pub fn resize(img: &ImageBuffer, width: usize, height: usize) -> Result<ImageBuffer, ImageError> {
    if width == 0 || height == 0 {
        return Err(ImageError::Invalid(format!("cannot resize to {width}x{height}")));
    }
    if width == img.width && height == img.height {
        return Ok(img.clone());
    }
    let c = img.channels;
    let sx = img.width as f64 / width as f64;
    let sy = img.height as f64 / height as f64;
    let taps = |o: usize, scale: f64, n: usize| {
        let p = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = p.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, (p - i0 as f64) as f32)
    };
    let cols: Vec<_> = (0..width).map(|x| taps(x, sx, img.width)).collect();
    let mut data = Vec::with_capacity(width * height * c);
    let stride = img.width * c;
    for y in 0..height {
        let (y0, y1, wy) = taps(y, sy, img.height);
        let r0 = &img.data[y0 * stride..(y0 + 1) * stride];
        let r1 = &img.data[y1 * stride..(y1 + 1) * stride];
        for &(x0, x1, wx) in &cols {
            for ch in 0..c {
                let top = r0[x0 * c + ch] * (1.0 - wx) + r0[x1 * c + ch] * wx;
                let bot = r1[x0 * c + ch] * (1.0 - wx) + r1[x1 * c + ch] * wx;
                data.push(top * (1.0 - wy) + bot * wy);
            }
        }
    }
    ImageBuffer::new(width, height, c, data)
}

/// Target size that makes the shorter side `target`, preserving aspect ratio.
pub fn min_side_dims(width: usize, height: usize, target: usize) -> (usize, usize) {
    let scale = |long: usize, short: usize| ((long as f64 * target as f64 / short as f64).round() as usize).max(target);
    if width <= height {
        (target, scale(height, width))
    } else {
        (scale(width, height), target)
    }
}

/// Aspect-preserving resize so that `min(width, height) == target`.
pub fn resize_min_side(img: &ImageBuffer, target: usize) -> Result<ImageBuffer, ImageError> {
    if target == 0 {
        return Err(ImageError::Invalid("target side must be >= 1".into()));
    }
    let (w, h) = min_side_dims(img.width, img.height, target);
    resize(img, w, h)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl Range {
    pub fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.max > self.min {
            rng.random_range(self.min..=self.max)
        } else {
            self.min
        }
    }
}

/// Augmentation parameters.
///
/// `lighting_eigvals` are eigenvalues of the RGB covariance of unit-range pixels,
/// multiplied by 255 so that the resulting shift is in pixel units; the columns of
/// `lighting_eigvecs` are the matching eigenvectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub jitter_strength: f64,
    pub blur_sigma: f64,
    pub blur_probability: f64,
    pub lighting_eigvals: [f64; 3],
    pub lighting_eigvecs: [[f64; 3]; 3],
    pub lighting_alpha_std: f64,
    pub scale_range: Range,
    pub aspect_range: Range,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            jitter_strength: 0.2,
            blur_sigma: 1.0,
            blur_probability: 0.5,
            lighting_eigvals: [0.0; 3],
            lighting_eigvecs: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            lighting_alpha_std: 0.1,
            scale_range: Range::new(1.0, 1.15),
            aspect_range: Range::new(0.9, 1.1),
        }
    }
}

impl AugmentConfig {
    /// Every augmentation disabled.
    pub fn identity() -> Self {
        Self {
            jitter_strength: 0.0,
            blur_probability: 0.0,
            lighting_eigvals: [0.0; 3],
            lighting_alpha_std: 0.0,
            scale_range: Range::new(1.0, 1.0),
            aspect_range: Range::new(1.0, 1.0),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ImageError> {
        let bad = |m: &str| Err(ImageError::Config(m.to_string()));
        if !(0.0..1.0).contains(&self.jitter_strength) {
            return bad("jitter_strength must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.blur_probability) {
            return bad("blur_probability must lie in [0, 1]");
        }
        if self.blur_sigma <= 0.0 {
            return bad("blur_sigma must be positive");
        }
        if self.lighting_alpha_std < 0.0 {
            return bad("lighting_alpha_std must be non-negative");
        }
        for r in [&self.scale_range, &self.aspect_range] {
            if r.min > r.max || r.min <= 0.0 {
                return bad("ranges need 0 < min <= max");
            }
        }
        let v = &self.lighting_eigvecs;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| v[k][i] * v[k][j]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                if (dot - expect).abs() > 1e-6 {
                    return bad("lighting eigenvectors are not orthonormal");
                }
            }
        }
        Ok(())
    }
}

/// Applies explicit brightness, contrast and saturation factors (1 = unchanged), then clamps.
///
/// Contrast blends with the mean luminance; saturation blends each pixel with its own
/// luminance.
pub fn apply_color_factors(img: &ImageBuffer, brightness: f32, contrast: f32, saturation: f32) -> ImageBuffer {
    let mut out = img.map(|v| v * brightness).clamped();
    let gray = luminance(&out);
    let mean = gray.data.iter().map(|&v| v as f64).sum::<f64>() as f32 / gray.data.len() as f32;
    out = out.map(|v| (v - mean) * contrast + mean).clamped();
    if out.channels == 3 {
        for px in out.data.chunks_exact_mut(3) {
            let l = luma(px[0], px[1], px[2]);
            for v in px.iter_mut() {
                *v = l + (*v - l) * saturation;
            }
        }
    }
    out.clamped()
}

/// Random brightness, contrast and saturation, each factor uniform in `[1 - s, 1 + s]`.
pub fn color_jitter(img: &ImageBuffer, cfg: &AugmentConfig, rng: &mut impl Rng) -> ImageBuffer {
    let s = cfg.jitter_strength;
    if s == 0.0 {
        return img.clone();
    }
    let mut f = || rng.random_range(1.0 - s..=1.0 + s) as f32;
    let (b, c, sat) = (f(), f(), f());
    apply_color_factors(img, b, c, sat)
}

/// Adds the same RGB shift `V·(α ⊙ λ)` to every pixel, `α ~ N(0, alpha_std)` drawn once.
pub fn lighting_noise(img: &ImageBuffer, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<ImageBuffer, ImageError> {
    cfg.validate()?;
    if img.channels != 3 {
        return Err(ImageError::Channels { expected: 3, got: img.channels });
    }
    let alpha: [f64; 3] = if cfg.lighting_alpha_std > 0.0 {
        let normal = Normal::new(0.0, cfg.lighting_alpha_std).expect("valid std");
        [normal.sample(rng), normal.sample(rng), normal.sample(rng)]
    } else {
        [0.0; 3]
    };
    Ok(apply_lighting_shift(img, lighting_shift(cfg, alpha)))
}

/// The per-pixel RGB shift for a given draw of `alpha`.
pub fn lighting_shift(cfg: &AugmentConfig, alpha: [f64; 3]) -> [f32; 3] {
    let mut shift = [0.0f32; 3];
    for (i, s) in shift.iter_mut().enumerate() {
        *s = (0..3)
            .map(|j| cfg.lighting_eigvecs[i][j] * alpha[j] * cfg.lighting_eigvals[j])
            .sum::<f64>() as f32;
    }
    shift
}

fn apply_lighting_shift(img: &ImageBuffer, shift: [f32; 3]) -> ImageBuffer {
    if shift == [0.0; 3] {
        return img.clone();
    }
    let mut out = img.clone();
    for px in out.data.chunks_exact_mut(3) {
        for (v, s) in px.iter_mut().zip(shift) {
            *v += s;
        }
    }
    out.clamped()
}

/// Estimates lighting eigen-statistics from up to `sample_size` randomly chosen pixels.
pub fn estimate_lighting<'a>(
    images: impl IntoIterator<Item = &'a ImageBuffer>,
    sample_size: usize,
    rng: &mut impl Rng,
) -> ([f64; 3], [[f64; 3]; 3]) {
    let images: Vec<&ImageBuffer> = images.into_iter().filter(|i| i.channels == 3).collect();
    let mut sum = [0.0f64; 3];
    let mut outer = [[0.0f64; 3]; 3];
    let mut count = 0usize;
    if !images.is_empty() {
        for _ in 0..sample_size {
            let img = images[rng.random_range(0..images.len())];
            let x = rng.random_range(0..img.width);
            let y = rng.random_range(0..img.height);
            let p = img.pixel(x, y);
            let v = [p[0] as f64 / 255.0, p[1] as f64 / 255.0, p[2] as f64 / 255.0];
            for i in 0..3 {
                sum[i] += v[i];
                for j in 0..3 {
                    outer[i][j] += v[i] * v[j];
                }
            }
            count += 1;
        }
    }
    if count < 2 {
        return ([0.0; 3], [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
    }
    let n = count as f64;
    let mut cov = [[0.0f64; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            cov[i][j] = (outer[i][j] - sum[i] * sum[j] / n) / (n - 1.0);
        }
    }
    let (vals, vecs) = symmetric_eigen3(cov);
    (vals.map(|v| v.max(0.0) * 255.0), vecs)
}

/// Jacobi eigen-decomposition of a symmetric 3×3 matrix; eigenvectors are columns,
/// sorted by descending eigenvalue.
pub fn symmetric_eigen3(mut a: [[f64; 3]; 3]) -> ([f64; 3], [[f64; 3]; 3]) {
    let mut v = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    for _ in 0..64 {
        let off = a[0][1].abs() + a[0][2].abs() + a[1][2].abs();
        if off < 1e-15 {
            break;
        }
        for (p, q) in [(0, 1), (0, 2), (1, 2)] {
            if a[p][q].abs() < 1e-300 {
                continue;
            }
            let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let t = if theta == 0.0 { 1.0 } else { t };
            let c = 1.0 / (t * t + 1.0).sqrt();
            let s = t * c;
            for k in 0..3 {
                let akp = a[k][p];
                let akq = a[k][q];
                a[k][p] = c * akp - s * akq;
                a[k][q] = s * akp + c * akq;
            }
            for k in 0..3 {
                let apk = a[p][k];
                let aqk = a[q][k];
                a[p][k] = c * apk - s * aqk;
                a[q][k] = s * apk + c * aqk;
            }
            for row in v.iter_mut() {
                let vkp = row[p];
                let vkq = row[q];
                row[p] = c * vkp - s * vkq;
                row[q] = s * vkp + c * vkq;
            }
        }
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| a[j][j].partial_cmp(&a[i][i]).unwrap_or(std::cmp::Ordering::Equal));
    let vals = order.map(|i| a[i][i]);
    let mut vecs = [[0.0; 3]; 3];
    for (col, &src) in order.iter().enumerate() {
        for row in 0..3 {
            vecs[row][col] = v[row][src];
        }
    }
    (vals, vecs)
}

/// Normalized 1-D Gaussian with radius `ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

/// Separable Gaussian blur with reflect padding.
pub fn gaussian_blur(img: &ImageBuffer, sigma: f64) -> ImageBuffer {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (w, h, c) = (img.width, img.height, img.channels);
    let stride = w * c;
    let mut tmp = vec![0.0f32; img.data.len()];
    let mut padded = vec![0.0f32; (w + 2 * r as usize) * c];
    for y in 0..h {
        let src = &img.data[y * stride..(y + 1) * stride];
        for (px, dst) in padded.chunks_exact_mut(c).enumerate() {
            let sx = reflect_index(px as isize - r, w);
            dst.copy_from_slice(&src[sx * c..(sx + 1) * c]);
        }
        for (i, out) in tmp[y * stride..(y + 1) * stride].iter_mut().enumerate() {
            let mut acc = 0.0f64;
            for (t, kv) in k.iter().enumerate() {
                acc += kv * padded[i + t * c] as f64;
            }
            *out = acc as f32;
        }
    }
    let mut out = Vec::with_capacity(img.data.len());
    let mut acc = vec![0.0f64; stride];
    for y in 0..h {
        acc.iter_mut().for_each(|a| *a = 0.0);
        for (t, kv) in k.iter().enumerate() {
            let sy = reflect_index(y as isize + t as isize - r, h);
            for (a, v) in acc.iter_mut().zip(&tmp[sy * stride..(sy + 1) * stride]) {
                *a += kv * *v as f64;
            }
        }
        out.extend(acc.iter().map(|&a| a as f32));
    }
    ImageBuffer { width: w, height: h, channels: c, data: out }.clamped()
}

/// Blurs with probability `blur_probability`, otherwise returns the input.
pub fn gaussian_blur_maybe(img: &ImageBuffer, cfg: &AugmentConfig, rng: &mut impl Rng) -> ImageBuffer {
    if cfg.blur_probability > 0.0 && rng.random_bool(cfg.blur_probability.min(1.0)) {
        gaussian_blur(img, cfg.blur_sigma)
    } else {
        img.clone()
    }
}

/// Minimum shorter side guaranteed by [`geometric_jitter`].
pub const MIN_JITTER_SIDE: usize = 224;

/// Rescales by `scale`, stretching width by `sqrt(aspect)` and height by `1/sqrt(aspect)`.
pub fn apply_geometric(img: &ImageBuffer, scale: f64, aspect: f64) -> Result<ImageBuffer, ImageError> {
    if scale == 1.0 && aspect == 1.0 {
        return Ok(img.clone());
    }
    let a = aspect.sqrt();
    let w = ((img.width as f64 * scale * a).round() as usize).max(1);
    let h = ((img.height as f64 * scale / a).round() as usize).max(1);
    let out = resize(img, w, h)?;
    if out.min_side() < MIN_JITTER_SIDE {
        resize_min_side(&out, MIN_JITTER_SIDE)
    } else {
        Ok(out)
    }
}

/// Random scale in `scale_range` and aspect multiplier in `aspect_range`.
pub fn geometric_jitter(img: &ImageBuffer, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<ImageBuffer, ImageError> {
    let scale = cfg.scale_range.sample(rng);
    let aspect = cfg.aspect_range.sample(rng);
    apply_geometric(img, scale, aspect)
}

/// Photometric augmentations in training order: color jitter, lighting noise, optional blur.
pub fn photometric_augment(img: &ImageBuffer, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<ImageBuffer, ImageError> {
    let out = color_jitter(img, cfg, rng);
    let out = lighting_noise(&out, cfg, rng)?;
    Ok(gaussian_blur_maybe(&out, cfg, rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rgb(w: usize, h: usize, seed: u64) -> ImageBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageBuffer::from_fn(w, h, 3, |_, _, _| rng.random_range(0.0..255.0)).unwrap()
    }

    #[test]
    fn grayscale_examples() {
        let px = |p: [f32; 3]| to_grayscale(&ImageBuffer::filled(1, 1, &p).unwrap()).unwrap().data()[0];
        assert_eq!(px([0.0, 0.0, 0.0]), 0.0);
        assert!((px([255.0, 255.0, 255.0]) - 255.0).abs() < 1e-4);
        assert!((px([255.0, 0.0, 0.0]) - 76.245).abs() < 1e-4);
    }

    #[test]
    fn grayscale_rejects_single_channel() {
        let g = ImageBuffer::filled(2, 2, &[1.0]).unwrap();
        assert!(matches!(to_grayscale(&g), Err(ImageError::Channels { .. })));
    }

    #[test]
    fn degenerate_images_are_rejected() {
        assert!(ImageBuffer::new(0, 4, 3, vec![]).is_err());
        assert!(ImageBuffer::new(2, 2, 3, vec![0.0; 11]).is_err());
    }

    #[test]
    fn resize_min_side_examples() {
        let dims = |w, h, t| {
            let out = resize_min_side(&ImageBuffer::filled(w, h, &[1.0, 2.0, 3.0]).unwrap(), t).unwrap();
            (out.width(), out.height())
        };
        assert_eq!(dims(1024, 768, 512), (683, 512));
        assert_eq!(dims(512, 512, 512), (512, 512));
        assert_eq!(dims(300, 900, 256), (256, 768));
    }

    #[test]
    fn resize_is_identity_at_target() {
        let img = rgb(40, 30, 1);
        assert_eq!(resize_min_side(&img, 30).unwrap(), img);
    }

    #[test]
    fn color_jitter_zero_strength_is_identity() {
        let img = rgb(8, 8, 2);
        let cfg = AugmentConfig { jitter_strength: 0.0, ..AugmentConfig::default() };
        assert_eq!(color_jitter(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(0)), img);
    }

    #[test]
    fn brightness_clamps() {
        let img = ImageBuffer::filled(2, 2, &[200.0, 200.0, 200.0]).unwrap();
        let out = apply_color_factors(&img, 2.0, 1.0, 1.0);
        assert!(out.data().iter().all(|&v| v == 255.0));
    }

    #[test]
    fn zero_saturation_gives_gray() {
        let img = rgb(6, 5, 3);
        let out = apply_color_factors(&img, 1.0, 1.0, 0.0);
        for (px, src) in out.data().chunks_exact(3).zip(img.data().chunks_exact(3)) {
            let l = luma(src[0], src[1], src[2]);
            for v in px {
                assert!((v - l).abs() < 1e-3, "{v} vs {l}");
            }
        }
    }

    #[test]
    fn lighting_identity_cases() {
        let img = rgb(5, 5, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let zero_alpha = AugmentConfig { lighting_eigvals: [3.0, 2.0, 1.0], lighting_alpha_std: 0.0, ..Default::default() };
        assert_eq!(lighting_noise(&img, &zero_alpha, &mut rng).unwrap(), img);
        let zero_vals = AugmentConfig { lighting_alpha_std: 5.0, ..Default::default() };
        assert_eq!(lighting_noise(&img, &zero_vals, &mut rng).unwrap(), img);
    }

    #[test]
    fn lighting_shift_matches_hand_computation() {
        let img = ImageBuffer::filled(4, 3, &[100.0, 100.0, 100.0]).unwrap();
        let cfg = AugmentConfig { lighting_eigvals: [1.0, 0.0, 0.0], lighting_alpha_std: 2.0, ..Default::default() };
        let out = lighting_noise(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        // replay the draw: alpha₁ is the first sample of N(0, 2)
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a1: f64 = Normal::new(0.0, 2.0).unwrap().sample(&mut rng);
        for px in out.data().chunks_exact(3) {
            assert!((px[0] - (100.0 + a1 as f32)).abs() < 1e-4);
            assert_eq!(px[1], 100.0);
            assert_eq!(px[2], 100.0);
        }
    }

    #[test]
    fn lighting_rejects_non_orthonormal() {
        let cfg = AugmentConfig { lighting_eigvecs: [[1.0, 0.1, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], ..Default::default() };
        assert!(matches!(
            lighting_noise(&rgb(2, 2, 0), &cfg, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(ImageError::Config(_))
        ));
    }

    #[test]
    fn estimated_lighting_is_orthonormal() {
        let imgs = [rgb(16, 16, 5), rgb(9, 20, 6)];
        let (vals, vecs) = estimate_lighting(imgs.iter(), 5000, &mut ChaCha8Rng::seed_from_u64(2));
        assert!(vals[0] >= vals[1] && vals[1] >= vals[2] && vals[2] >= 0.0);
        let cfg = AugmentConfig { lighting_eigvals: vals, lighting_eigvecs: vecs, ..Default::default() };
        cfg.validate().unwrap();
    }

    #[test]
    fn blur_examples() {
        let cfg = AugmentConfig { blur_probability: 0.0, ..Default::default() };
        let img = rgb(7, 7, 8);
        assert_eq!(gaussian_blur_maybe(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(0)), img);

        let flat = ImageBuffer::filled(9, 6, &[42.0, 7.0, 200.0]).unwrap();
        let blurred = gaussian_blur(&flat, 1.3);
        for (a, b) in blurred.data().iter().zip(flat.data()) {
            assert!((a - b).abs() < 1e-4);
        }

        // impulse of height 255 so clamping never bites
        let impulse = ImageBuffer::from_fn(15, 15, 1, |x, y, _| if x == 7 && y == 7 { 255.0 } else { 0.0 }).unwrap();
        let out = gaussian_blur(&impulse, 1.0);
        // independent evaluation of the normalized sampled Gaussian center weight
        let norm: f64 = (-3i32..=3).map(|i| (-(i * i) as f64 / 2.0).exp()).sum();
        let center = 1.0 / norm;
        assert!((out.get(7, 7, 0) as f64 - 255.0 * center * center).abs() < 1e-3);
    }

    #[test]
    fn kernel_sums_to_one() {
        for sigma in [0.3, 1.0, 2.5, 7.0] {
            let s: f64 = gaussian_kernel(sigma).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn geometric_examples() {
        let img = rgb(512, 512, 1);
        assert_eq!(apply_geometric(&img, 1.0, 1.0).unwrap(), img);
        let half = apply_geometric(&img, 0.5, 1.0).unwrap();
        assert_eq!((half.width(), half.height()), (256, 256));
        let sq = rgb(500, 500, 2);
        let stretched = apply_geometric(&sq, 1.0, 1.2).unwrap();
        let ratio = stretched.width() as f64 / stretched.height() as f64;
        let tol = 1.0 / stretched.height() as f64 + 1.2 / stretched.height() as f64;
        assert!((ratio - 1.2).abs() <= tol, "ratio {ratio}");
        let cfg = AugmentConfig::identity();
        assert_eq!(geometric_jitter(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap(), img);
    }

    #[test]
    fn geometric_floor_is_enforced() {
        let out = apply_geometric(&rgb(300, 300, 3), 0.5, 1.0).unwrap();
        assert_eq!(out.min_side(), MIN_JITTER_SIDE);
    }

    #[test]
    fn identity_config_is_pixel_identical() {
        let img = rgb(12, 9, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert_eq!(photometric_augment(&img, &AugmentConfig::identity(), &mut rng).unwrap(), img);
    }

    #[test]
    fn reflect_index_folds() {
        let got: Vec<_> = (-3..8).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(got, vec![2, 1, 0, 0, 1, 2, 3, 3, 2, 1, 0]);
        assert_eq!(reflect_index(-5, 1), 0);
    }

    proptest! {
        #[test]
        fn grayscale_within_channel_bounds(r in 0f32..255.0, g in 0f32..255.0, b in 0f32..255.0) {
            let l = to_grayscale(&ImageBuffer::filled(1, 1, &[r, g, b]).unwrap()).unwrap().data()[0];
            prop_assert!(l >= r.min(g).min(b) - 1e-3 && l <= r.max(g).max(b) + 1e-3);
        }

        #[test]
        fn resize_hits_target(w in 1usize..300, h in 1usize..300, t in 1usize..128) {
            let img = ImageBuffer::filled(w, h, &[5.0]).unwrap();
            let out = resize_min_side(&img, t).unwrap();
            prop_assert_eq!(out.min_side(), t);
            let again = resize_min_side(&out, t).unwrap();
            prop_assert_eq!(again, out);
        }
    }
}
