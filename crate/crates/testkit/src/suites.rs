//! Ready-made check batteries shared by the testkit tests and the acceptance runner.

use pictor::descriptors::{self as lib, ColorSpace};
use pictor::imaging::ImageBuffer;
use pictor::nn::{BatchNorm2d, Conv2d, Graph, Init, Linear, Mode, NnError, NodeId, ParamStore, ResBlock, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::descriptors as oracle;
use crate::fixtures::random_small_image;
use crate::gradcheck::{check_directional, check_elementwise, random_tensor, random_tensor_away_from_zero};
use crate::gradcheck::{CheckOptions, GradCheck};

pub struct GradCase {
    pub name: &'static str,
    pub tolerance: f64,
    pub result: Result<GradCheck, NnError>,
}

impl GradCase {
    pub fn passed(&self) -> bool {
        matches!(&self.result, Ok(r) if r.max_rel_error <= self.tolerance && r.compared > 0)
    }

    pub fn summary(&self) -> String {
        match &self.result {
            Ok(r) => format!(
                "{}: max rel error {:.2e} over {} comparisons (tolerance {:.0e})",
                self.name, r.max_rel_error, r.compared, self.tolerance
            ),
            Err(e) => format!("{}: error {e}", self.name),
        }
    }
}

fn jitter_params(ps: &mut ParamStore<f64>, rng: &mut impl Rng) {
    let ids: Vec<_> = ps.iter().map(|(id, _)| id).collect();
    for id in ids {
        let p = ps.get_mut(id);
        let running_var = p.name.ends_with("running_var");
        for v in p.value.data_mut() {
            *v = if running_var { rng.random_range(0.5..2.0) } else { *v + rng.random_range(-0.3..0.3) };
        }
    }
}

fn opts(seed: u64) -> CheckOptions {
    CheckOptions { seed, ..CheckOptions::default() }
}

/// Finite-difference checks for every differentiable operation and layer.
pub fn autodiff_suite(seed: u64) -> Vec<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::new();
    let mut push = |name, tolerance, result| cases.push(GradCase { name, tolerance, result });

    // conv2d: exhaustive on a 5×5 input, directional on a strided padded case.
    {
        let mut ps = ParamStore::new();
        let conv = Conv2d::new(&mut ps, "c", 2, 3, 3, 1, 1, &mut rng).expect("valid conv");
        let x = random_tensor(&[1, 5, 5, 2], &mut rng);
        let r = check_elementwise(&[x], &ps, |g: &mut Graph<f64>, ps: &ParamStore<f64>, i: &[NodeId]| conv.forward(g, ps, i[0]), opts(seed), true);
        push("conv2d 5x5 elementwise", 1e-4, r);
        let mut ps = ParamStore::new();
        let conv = Conv2d::new(&mut ps, "c", 3, 4, 3, 2, 1, &mut rng).expect("valid conv");
        let x = random_tensor(&[2, 7, 6, 3], &mut rng);
        let r = check_directional(&[x], &ps, |g: &mut Graph<f64>, ps: &ParamStore<f64>, i: &[NodeId]| conv.forward(g, ps, i[0]), opts(seed + 1));
        push("conv2d stride 2 pad 1", 1e-4, r);
    }
    // batch norm in both modes.
    for (name, mode) in [("batch_norm train", Mode::Train), ("batch_norm eval", Mode::Eval)] {
        let mut ps = ParamStore::new();
        let bn = BatchNorm2d::new(&mut ps, "bn", 3).expect("valid bn");
        jitter_params(&mut ps, &mut rng);
        let x = random_tensor(&[3, 3, 4, 3], &mut rng);
        let r = check_directional(&[x], &ps, move |g: &mut Graph<f64>, ps: &ParamStore<f64>, i: &[NodeId]| bn.forward(g, ps, i[0], mode), opts(seed + 2));
        push(name, 1e-4, r);
    }
    {
        let x = random_tensor_away_from_zero(&[2, 3, 3, 2], 0.05, 2.0, &mut rng);
        let r = check_directional(&[x], &ParamStore::new(), |g: &mut Graph<f64>, _: &ParamStore<f64>, i: &[NodeId]| Ok(g.relu(i[0])), opts(seed + 3));
        push("relu", 1e-4, r);
    }
    {
        let x = random_tensor(&[1, 4, 4, 1], &mut rng);
        let r = check_elementwise(&[x], &ParamStore::new(), |g: &mut Graph<f64>, _: &ParamStore<f64>, i: &[NodeId]| g.max_pool(i[0], 2, 2, 0), opts(seed), true);
        push("max_pool 4x4 elementwise", 1e-4, r);
        let x = random_tensor(&[2, 6, 5, 3], &mut rng);
        let r = check_directional(&[x], &ParamStore::new(), |g: &mut Graph<f64>, _: &ParamStore<f64>, i: &[NodeId]| g.max_pool(i[0], 3, 2, 1), opts(seed + 4));
        push("max_pool 3x3 stride 2 pad 1", 1e-4, r);
        let x = random_tensor(&[2, 3, 4, 5], &mut rng);
        let r = check_directional(&[x], &ParamStore::new(), |g: &mut Graph<f64>, _: &ParamStore<f64>, i: &[NodeId]| g.global_avg_pool(i[0]), opts(seed + 5));
        push("global_avg_pool", 1e-4, r);
    }
    {
        let mut ps = ParamStore::new();
        let fc = Linear::new(&mut ps, "fc", 6, 4, Init::KaimingNormal { fan_in: 6 }, &mut rng).expect("valid fc");
        jitter_params(&mut ps, &mut rng);
        let x = random_tensor(&[3, 6], &mut rng);
        let r = check_directional(&[x], &ps, |g: &mut Graph<f64>, ps: &ParamStore<f64>, i: &[NodeId]| fc.forward(g, ps, i[0]), opts(seed + 6));
        push("linear", 1e-4, r);
    }
    {
        let x = random_tensor(&[4, 5], &mut rng);
        let labels = [0usize, 3, 4, 1];
        let r = check_elementwise(&[x], &ParamStore::new(), move |g: &mut Graph<f64>, _: &ParamStore<f64>, i: &[NodeId]| g.softmax_cross_entropy(i[0], &labels), opts(seed), true);
        push("softmax_cross_entropy elementwise", 1e-5, r);
    }
    {
        let x = random_tensor(&[1, 8, 8, 8], &mut rng);
        let mut ps = ParamStore::new();
        let block = ResBlock::new(&mut ps, "rb", 8, 8, 1, &mut rng).expect("valid block");
        jitter_params(&mut ps, &mut rng);
        let r = check_directional(&[x], &ps, |g: &mut Graph<f64>, ps: &ParamStore<f64>, i: &[NodeId]| block.forward(g, ps, i[0], Mode::Eval), opts(seed + 7));
        push("res_block 1x8x8x8 eval", 1e-3, r);
        let x = random_tensor(&[2, 6, 6, 8], &mut rng);
        let mut ps = ParamStore::new();
        let block = ResBlock::new(&mut ps, "rb", 8, 16, 2, &mut rng).expect("valid block");
        jitter_params(&mut ps, &mut rng);
        let r = check_directional(&[x], &ps, |g: &mut Graph<f64>, ps: &ParamStore<f64>, i: &[NodeId]| block.forward(g, ps, i[0], Mode::Train), opts(seed + 8));
        push("res_block stride 2 projection train", 1e-3, r);
    }
    {
        let x = random_tensor(&[2, 5, 6, 3], &mut rng);
        let grid = Tensor::new(vec![2, 4, 3, 2], (0..48).map(|_| rng.random_range(-1.1..1.1)).collect()).expect("shape");
        let r = check_directional(&[x, grid], &ParamStore::new(), |g: &mut Graph<f64>, _: &ParamStore<f64>, i: &[NodeId]| g.bilinear_sample(i[0], i[1]), opts(seed + 9));
        push("bilinear_sample", 1e-3, r);
    }
    {
        let x = random_tensor(&[2, 6, 8, 2], &mut rng);
        let raw = random_tensor(&[2, 3], &mut rng);
        let extents = [(8.0 / 6.0, 1.0), (1.0, 1.0)];
        let r = check_directional(&[x, raw], &ParamStore::new(), move |g: &mut Graph<f64>, _: &ParamStore<f64>, i: &[NodeId]| {
            let theta = g.constrained_affine(i[1], 0.3, &extents)?;
            let grid = g.affine_grid(theta, 3, 3, &extents)?;
            g.bilinear_sample(i[0], grid)
        }, opts(seed + 10));
        push("constrained_affine -> affine_grid -> bilinear_sample", 1e-3, r);
    }
    {
        let a = random_tensor(&[2, 3], &mut rng);
        let b = random_tensor(&[2, 3], &mut rng);
        let c = random_tensor(&[1, 2], &mut rng);
        let r = check_directional(&[a, b, c], &ParamStore::new(), |g: &mut Graph<f64>, _: &ParamStore<f64>, i: &[NodeId]| {
            let s = g.add(i[0], i[1])?;
            let s = g.scale(s, 0.7);
            let row = g.select_batch(s, 1)?;
            let row = g.concat_last(&[row, i[2]])?;
            let top = g.select_batch(i[0], 0)?;
            let top = g.concat_last(&[top, i[2]])?;
            g.concat_batch(&[row, top])
        }, opts(seed + 11));
        push("add/scale/select/concat", 1e-4, r);
    }
    {
        let mut ps = ParamStore::new();
        let conv = Conv2d::new(&mut ps, "c", 2, 3, 3, 1, 1, &mut rng).expect("valid conv");
        let fc = Linear::new(&mut ps, "fc", 3, 5, Init::KaimingNormal { fan_in: 3 }, &mut rng).expect("valid fc");
        jitter_params(&mut ps, &mut rng);
        let x = random_tensor(&[2, 4, 4, 2], &mut rng);
        let labels = [2usize, 4];
        let r = check_elementwise(&[x], &ps, move |g: &mut Graph<f64>, ps: &ParamStore<f64>, i: &[NodeId]| {
            let h = conv.forward(g, ps, i[0])?;
            let h = g.relu(h);
            let h = g.global_avg_pool(h)?;
            let logits = fc.forward(g, ps, h)?;
            g.softmax_cross_entropy(logits, &labels)
        }, opts(seed), true);
        push("conv -> relu -> pool -> linear -> cross entropy, per parameter", 1e-3, r);
    }
    cases
}

pub struct OracleCase {
    pub name: &'static str,
    pub images: usize,
    /// Largest per-bin absolute difference, infinite on a length mismatch or error.
    pub max_abs_error: f64,
}

fn compare(lib: Vec<f64>, oracle: Vec<f64>) -> f64 {
    if lib.len() != oracle.len() {
        return f64::INFINITY;
    }
    lib.iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

type RawPair = (&'static str, fn(&ImageBuffer) -> Vec<f64>, fn(&ImageBuffer) -> Vec<f64>);

/// Library descriptors (raw counts and sums) against the naive oracles on random small
/// images.
pub fn descriptor_oracle_suite(images: usize, seed: u64) -> Vec<OracleCase> {
    let pairs: [RawPair; 8] = [
        ("hist_l", lib::hist_l_raw, oracle::hist_l),
        ("hist_rgb", lib::hist_rgb_raw, oracle::hist_rgb),
        ("chromaticity", lib::chromaticity_raw, oracle::chromaticity),
        ("lbp_l", |i| lib::lbp_raw(i, ColorSpace::Luminance).unwrap_or_default(), oracle::lbp_l),
        ("lbp_rgb", |i| lib::lbp_raw(i, ColorSpace::Rgb).unwrap_or_default(), oracle::lbp_rgb),
        ("lcc", |i| lib::lcc_raw(i).unwrap_or_default(), oracle::lcc),
        (
            "lbp_lcc",
            |i| {
                let mut v = lib::lbp_raw(i, ColorSpace::Luminance).unwrap_or_default();
                v.extend(lib::lcc_raw(i).unwrap_or_default());
                v
            },
            oracle::lbp_lcc,
        ),
        ("hog", lib::hog_raw, oracle::hog),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let imgs: Vec<ImageBuffer> = (0..images).map(|_| random_small_image(&mut rng)).collect();
    pairs
        .iter()
        .map(|&(name, ours, theirs)| OracleCase {
            name,
            images: imgs.len(),
            max_abs_error: imgs.iter().map(|im| compare(ours(im), theirs(im))).fold(0.0, f64::max),
        })
        .collect()
}

/// Output dimensions fixed by the descriptor contract.
pub const CONTRACT_DIMS: [(lib::DescriptorKind, usize); 8] = [
    (lib::DescriptorKind::HistL, 256),
    (lib::DescriptorKind::HistRgb, 768),
    (lib::DescriptorKind::Chromaticity, 10),
    (lib::DescriptorKind::LbpL, 243),
    (lib::DescriptorKind::LbpLcc, 499),
    (lib::DescriptorKind::Hog, 81),
    (lib::DescriptorKind::GistRgb, 512),
    (lib::DescriptorKind::GaborL, 32),
];

/// `(kind, contract dim, extracted length)` on a random 40×32 image.
pub fn descriptor_dims(seed: u64) -> Vec<(lib::DescriptorKind, usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let img = crate::fixtures::random_image(40, 32, 256, &mut rng);
    CONTRACT_DIMS
        .iter()
        .map(|&(kind, dim)| (kind, dim, kind.extract(&img).map(|f| f.values.len()).unwrap_or(0)))
        .collect()
}
