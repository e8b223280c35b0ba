//! Region-of-interest proposal: two fine-scale crops (random and disjoint, or chosen
//! by spatial transformers) and one coarse-scale random crop.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::{self, ImageBuffer, ImageError};
use crate::nn::{BatchNorm2d, Conv2d, Graph, Init, Linear, Mode, NnError, NodeId, ParamStore, ResBlock, Tensor};

/// Side of every crop fed to the network.
pub const CROP_SIZE: usize = 224;
/// Shorter side of the fine-scale source image.
pub const FINE_SIDE: usize = 512;
/// Shorter side of the coarse-scale source image.
pub const COARSE_SIDE: usize = 256;
/// Smallest admissible transformer scale: a native-resolution 224 window at 512.
pub const MIN_STN_SCALE: f64 = CROP_SIZE as f64 / FINE_SIDE as f64;
/// Rejection-sampling budget before falling back to corner placement.
pub const MAX_PAIR_ATTEMPTS: usize = 1000;

#[derive(Debug, Error)]
pub enum RoiError {
    #[error("invalid size: {0}")]
    InvalidSize(String),
    #[error("invalid transform: {0}")]
    InvalidTransform(String),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CropStrategy {
    Random,
    Stn,
}

impl std::str::FromStr for CropStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "random" => Ok(Self::Random),
            "stn" => Ok(Self::Stn),
            other => Err(format!("unknown crop strategy `{other}` (expected random or stn)")),
        }
    }
}

impl std::fmt::Display for CropStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Random => "random",
            Self::Stn => "stn",
        })
    }
}

/// Axis-aligned square window in source pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropSpec {
    /// Shorter side of the source image the offsets refer to.
    pub source_scale: usize,
    pub x: usize,
    pub y: usize,
    pub size: usize,
}

impl CropSpec {
    pub fn intersection_area(&self, other: &CropSpec) -> usize {
        let w = (self.x + self.size).min(other.x + other.size).saturating_sub(self.x.max(other.x));
        let h = (self.y + self.size).min(other.y + other.size).saturating_sub(self.y.max(other.y));
        w * h
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.x + self.size <= width && self.y + self.size <= height
    }

    pub fn extract(&self, img: &ImageBuffer) -> Result<ImageBuffer, ImageError> {
        img.crop(self.x, self.y, self.size, self.size)
    }
}

/// Scale-and-translation transform `[[s, 0, tx], [0, s, ty]]`.
///
/// Coordinates are normalized so that the shorter image side spans `[-1, 1]`; the
/// longer side spans `[-e, e]` with `e = long / short`. The sampled window is
/// `[tx - s, tx + s] × [ty - s, ty + s]` in that frame, hence always square in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub s: f64,
    pub tx: f64,
    pub ty: f64,
}

impl AffineParams {
    pub fn identity() -> Self {
        Self { s: 1.0, tx: 0.0, ty: 0.0 }
    }

    pub fn matrix(&self) -> [[f64; 3]; 2] {
        [[self.s, 0.0, self.tx], [0.0, self.s, self.ty]]
    }

    /// Checks `s ∈ (0, 1]` and that the window stays inside an image with the given extents.
    pub fn validate(&self, extents: (f64, f64)) -> Result<(), RoiError> {
        let tol = 1e-6;
        if !(self.s > 0.0 && self.s <= 1.0 + tol) {
            return Err(RoiError::InvalidTransform(format!("scale {} outside (0, 1]", self.s)));
        }
        if self.tx.abs() + self.s > extents.0 + tol || self.ty.abs() + self.s > extents.1 + tol {
            return Err(RoiError::InvalidTransform(format!("window {:?} leaves the image", self)));
        }
        Ok(())
    }
}

/// `(width / short, height / short)`.
pub fn extents(width: usize, height: usize) -> (f64, f64) {
    let short = width.min(height) as f64;
    (width as f64 / short, height as f64 / short)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Provenance {
    Window(CropSpec),
    Transform(AffineParams),
}

/// The three network inputs for one image.
#[derive(Clone, Debug)]
pub struct CropSet {
    pub crop1: ImageBuffer,
    pub crop2: ImageBuffer,
    pub crop3: ImageBuffer,
    pub provenance: [Provenance; 3],
}

fn check_crop_source(width: usize, height: usize) -> Result<(), RoiError> {
    if width.min(height) < CROP_SIZE {
        return Err(RoiError::InvalidSize(format!(
            "{width}x{height} source cannot hold a {CROP_SIZE}px crop"
        )));
    }
    Ok(())
}

/// Uniform valid crop position in a `width × height` source.
pub fn random_crop_in(width: usize, height: usize, source_scale: usize, rng: &mut impl Rng) -> Result<CropSpec, RoiError> {
    check_crop_source(width, height)?;
    Ok(CropSpec {
        source_scale,
        x: rng.random_range(0..=width - CROP_SIZE),
        y: rng.random_range(0..=height - CROP_SIZE),
        size: CROP_SIZE,
    })
}

/// Random crop from the coarse (256 shorter side) image.
pub fn random_crop(img256: &ImageBuffer, rng: &mut impl Rng) -> Result<CropSpec, RoiError> {
    random_crop_in(img256.width(), img256.height(), COARSE_SIDE, rng)
}

/// Two uniformly drawn crops with zero intersection, by rejection sampling.
///
/// After [`MAX_PAIR_ATTEMPTS`] rejections the crops are placed at opposite corners.
pub fn random_nonoverlapping_pair_in(
    width: usize,
    height: usize,
    rng: &mut impl Rng,
) -> Result<(CropSpec, CropSpec), RoiError> {
    check_crop_source(width, height)?;
    if width.max(height) < 2 * CROP_SIZE {
        return Err(RoiError::InvalidSize(format!(
            "{width}x{height} source cannot hold two disjoint {CROP_SIZE}px crops"
        )));
    }
    for _ in 0..MAX_PAIR_ATTEMPTS {
        let a = random_crop_in(width, height, FINE_SIDE, rng)?;
        let b = random_crop_in(width, height, FINE_SIDE, rng)?;
        if a.intersection_area(&b) == 0 {
            return Ok((a, b));
        }
    }
    let a = CropSpec { source_scale: FINE_SIDE, x: 0, y: 0, size: CROP_SIZE };
    let b = CropSpec { source_scale: FINE_SIDE, x: width - CROP_SIZE, y: height - CROP_SIZE, size: CROP_SIZE };
    Ok((a, b))
}

pub fn random_nonoverlapping_pair(img512: &ImageBuffer, rng: &mut impl Rng) -> Result<(CropSpec, CropSpec), RoiError> {
    random_nonoverlapping_pair_in(img512.width(), img512.height(), rng)
}

/// Channels-last image values mapped to roughly `[-1, 1]` for the network.
pub fn normalize_pixels(img: &ImageBuffer) -> Vec<f32> {
    img.data().iter().map(|v| v / 127.5 - 1.0).collect()
}

fn denormalize_pixels(data: &[f32]) -> Vec<f32> {
    data.iter().map(|v| ((v + 1.0) * 127.5).clamp(0.0, 255.0)).collect()
}

/// Samples the `224 × 224` window selected by `theta` with bilinear interpolation.
pub fn apply_affine_crop(img: &ImageBuffer, theta: &AffineParams) -> Result<ImageBuffer, RoiError> {
    let ext = extents(img.width(), img.height());
    let mut g = Graph::<f64>::new();
    let data = img.data().iter().map(|&v| v as f64).collect();
    let x = g.input(Tensor::new(vec![1, img.height(), img.width(), img.channels()], data)?, false);
    let th = g.input(Tensor::new(vec![1, 3], vec![theta.s, theta.tx, theta.ty])?, false);
    let grid = g.affine_grid(th, CROP_SIZE, CROP_SIZE, &[ext])?;
    let out = g.bilinear_sample(x, grid)?;
    let values = g.value(out).data().iter().map(|&v| v as f32).collect();
    Ok(ImageBuffer::new(CROP_SIZE, CROP_SIZE, img.channels(), values)?)
}

/// Localization network of one spatial transformer: a reduced-width 18-layer
/// residual stack (stem plus four stages of two bottleneck blocks) and a 3-output
/// regressor whose zero-initialized weights and bias start at the centered window.
#[derive(Clone, Debug)]
pub struct Localizer {
    pub stem: Conv2d,
    pub stem_bn: BatchNorm2d,
    pub blocks: Vec<ResBlock>,
    pub head: Linear,
}

/// Input resolution of the localization network.
pub const LOCALIZER_INPUT: usize = CROP_SIZE;

impl Localizer {
    pub fn new(ps: &mut ParamStore<f32>, name: &str, width_factor: f64, rng: &mut impl Rng) -> Result<Self, NnError> {
        let ch = |c: usize| ((c as f64 * width_factor).round() as usize).max(4) / 4 * 4;
        let stem_c = ((64.0 * width_factor).round() as usize).max(1);
        let widths = [ch(64), ch(128), ch(256), ch(512)];
        let mut blocks = Vec::new();
        let mut cin = stem_c;
        for (stage, &w) in widths.iter().enumerate() {
            for i in 0..2 {
                let stride = if stage > 0 && i == 0 { 2 } else { 1 };
                blocks.push(ResBlock::new(ps, &format!("{name}.layer{}.{}", stage + 1, i), cin, w, stride, rng)?);
                cin = w;
            }
        }
        Ok(Self {
            stem: Conv2d::new(ps, &format!("{name}.stem"), 3, stem_c, 7, 2, 3, rng)?,
            stem_bn: BatchNorm2d::new(ps, &format!("{name}.stem_bn"), stem_c)?,
            blocks,
            head: Linear::new(ps, &format!("{name}.fc"), cin, 3, Init::Zeros, rng)?,
        })
    }

    /// Raw regressor outputs `[n, 3]` for a `[n, 224, 224, 3]` input.
    pub fn forward(&self, g: &mut Graph<f32>, ps: &ParamStore<f32>, x: NodeId, mode: Mode) -> Result<NodeId, NnError> {
        let h = self.stem.forward(g, ps, x)?;
        let h = self.stem_bn.forward(g, ps, h, mode)?;
        let h = g.relu(h);
        let mut h = g.max_pool(h, 3, 2, 1)?;
        for b in &self.blocks {
            h = b.forward(g, ps, h, mode)?;
        }
        let pooled = g.global_avg_pool(h)?;
        self.head.forward(g, ps, pooled)
    }
}

/// Localization input: the fine-scale image squashed to `224 × 224`.
pub fn localizer_input(img512: &ImageBuffer) -> Result<ImageBuffer, ImageError> {
    imaging::resize(img512, LOCALIZER_INPUT, LOCALIZER_INPUT)
}

/// Transform parameters chosen by both transformers for one fine-scale image.
pub fn stn_propose(
    img512: &ImageBuffer,
    localizers: &[Localizer; 2],
    ps: &ParamStore<f32>,
) -> Result<(AffineParams, AffineParams), RoiError> {
    let loc = localizer_input(img512)?;
    let ext = extents(img512.width(), img512.height());
    let mut g = Graph::<f32>::new();
    let x = g.input(Tensor::new(vec![1, LOCALIZER_INPUT, LOCALIZER_INPUT, 3], normalize_pixels(&loc))?, false);
    let mut out = [AffineParams::identity(); 2];
    for (o, l) in out.iter_mut().zip(localizers) {
        let raw = l.forward(&mut g, ps, x, Mode::Eval)?;
        let theta = g.constrained_affine(raw, MIN_STN_SCALE as f32, &[(ext.0 as f32, ext.1 as f32)])?;
        let t = g.value(theta).data();
        *o = AffineParams { s: t[0] as f64, tx: t[1] as f64, ty: t[2] as f64 };
    }
    Ok((out[0], out[1]))
}

/// Localizers and the store holding their parameters, for transformer-based proposals.
pub struct StnContext<'a> {
    pub localizers: &'a [Localizer; 2],
    pub params: &'a ParamStore<f32>,
}

/// Full proposal for one image: resize to both scales, choose the two fine crops with
/// `strategy`, and draw the coarse crop at random.
pub fn propose(
    img: &ImageBuffer,
    strategy: CropStrategy,
    rng: &mut impl Rng,
    stn: Option<StnContext<'_>>,
) -> Result<CropSet, RoiError> {
    let rgb = ensure_rgb(img);
    let img512 = imaging::resize_min_side(&rgb, FINE_SIDE)?;
    let img256 = imaging::resize_min_side(&rgb, COARSE_SIDE)?;
    propose_from_scales(&img512, &img256, strategy, rng, stn)
}

/// [`propose`] on already-resized fine and coarse images.
pub fn propose_from_scales(
    img512: &ImageBuffer,
    img256: &ImageBuffer,
    strategy: CropStrategy,
    rng: &mut impl Rng,
    stn: Option<StnContext<'_>>,
) -> Result<CropSet, RoiError> {
    let c3 = random_crop(img256, rng)?;
    let crop3 = c3.extract(img256)?;
    match strategy {
        CropStrategy::Random => {
            let (a, b) = random_nonoverlapping_pair(img512, rng)?;
            Ok(CropSet {
                crop1: a.extract(img512)?,
                crop2: b.extract(img512)?,
                crop3,
                provenance: [Provenance::Window(a), Provenance::Window(b), Provenance::Window(c3)],
            })
        }
        CropStrategy::Stn => {
            let ctx = stn.ok_or_else(|| RoiError::InvalidTransform("stn strategy needs localizers".into()))?;
            let (t1, t2) = stn_propose(img512, ctx.localizers, ctx.params)?;
            Ok(CropSet {
                crop1: apply_affine_crop(img512, &t1)?,
                crop2: apply_affine_crop(img512, &t2)?,
                crop3,
                provenance: [Provenance::Transform(t1), Provenance::Transform(t2), Provenance::Window(c3)],
            })
        }
    }
}

pub fn ensure_rgb(img: &ImageBuffer) -> ImageBuffer {
    if img.channels() == 3 {
        img.clone()
    } else {
        let g = img.data();
        ImageBuffer::from_fn(img.width(), img.height(), 3, |x, y, _| g[y * img.width() + x]).expect("valid")
    }
}

/// Converts a normalized network tensor slice back to an image (for inspection).
pub fn tensor_to_image(data: &[f32], size: usize) -> Result<ImageBuffer, ImageError> {
    ImageBuffer::new(size, size, 3, denormalize_pixels(data))
}
