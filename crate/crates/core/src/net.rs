//! Three-branch multitask residual network with artist, style and genre heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use crate::dataset::Task;
use crate::descriptors::FeatureVector;
use crate::imaging::ImageBuffer;
use crate::nn::checkpoint::Checkpoint;
use crate::nn::{
    softmax_rows, BatchNorm2d, Conv2d, Graph, Init, Linear, Mode, NnError, NodeId, ParamStore, ResBlock, Tensor,
};
use crate::roi::{self, CropSet, CropStrategy, Localizer, CROP_SIZE, MIN_STN_SCALE};

/// Channel counts of the full-width architecture.
pub const STEM_CHANNELS: usize = 64;
pub const BRANCH_CHANNELS: usize = 256;
pub const TRUNK_CHANNELS: [usize; 3] = [512, 1024, 2048];
/// Blocks per trunk stage, the first of each with stride 2.
pub const TRUNK_DEPTHS: [usize; 3] = [3, 6, 4];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    /// Multiplier applied to every channel count of the full architecture.
    pub width_factor: f64,
    pub num_artist: usize,
    pub num_style: usize,
    pub num_genre: usize,
    /// Dimension of the hand-crafted descriptor concatenated before the heads, 0 for none.
    pub inject_dim: usize,
    pub crop_strategy: CropStrategy,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            width_factor: 1.0 / 16.0,
            num_artist: 1508,
            num_style: 125,
            num_genre: 41,
            inject_dim: 0,
            crop_strategy: CropStrategy::Random,
        }
    }
}

impl NetConfig {
    pub fn classes(&self) -> [usize; 3] {
        [self.num_artist, self.num_style, self.num_genre]
    }

    /// Scaled channel count; must be a positive integer.
    pub fn channels(&self, full: usize) -> Result<usize, NnError> {
        let v = full as f64 * self.width_factor;
        let r = v.round();
        if r < 1.0 || (v - r).abs() > 1e-9 {
            return Err(NnError::Config(format!(
                "width factor {} turns {full} channels into {v}",
                self.width_factor
            )));
        }
        Ok(r as usize)
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if !(self.width_factor > 0.0 && self.width_factor.is_finite()) {
            return Err(NnError::Config("width factor must be positive".into()));
        }
        self.channels(STEM_CHANNELS)?;
        for full in [BRANCH_CHANNELS, TRUNK_CHANNELS[0], TRUNK_CHANNELS[1], TRUNK_CHANNELS[2]] {
            if self.channels(full)? % 4 != 0 {
                return Err(NnError::Config(format!(
                    "width factor {} leaves {full} channels not divisible by 4",
                    self.width_factor
                )));
            }
        }
        if self.classes().iter().any(|&k| k < 2) {
            return Err(NnError::Config("every head needs at least 2 classes".into()));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.channels(TRUNK_CHANNELS[2]).unwrap_or(0)
    }

    pub fn head_input_dim(&self) -> usize {
        self.feature_dim() + self.inject_dim
    }
}

/// Per-branch input layers: 7×7/2 convolution, normalization, ReLU, 3×3/1 max pooling,
/// then three bottleneck blocks (the first with stride 2).
#[derive(Clone, Debug)]
pub struct Branch {
    pub stem: Conv2d,
    pub stem_bn: BatchNorm2d,
    pub blocks: Vec<ResBlock>,
}

impl Branch {
    fn new(ps: &mut ParamStore<f32>, name: &str, cfg: &NetConfig, rng: &mut ChaCha8Rng) -> Result<Self, NnError> {
        let c0 = cfg.channels(STEM_CHANNELS)?;
        let c1 = cfg.channels(BRANCH_CHANNELS)?;
        let mut blocks = Vec::new();
        for i in 0..3 {
            let (cin, stride) = if i == 0 { (c0, 2) } else { (c1, 1) };
            blocks.push(ResBlock::new(ps, &format!("{name}.block{i}"), cin, c1, stride, rng)?);
        }
        Ok(Self {
            stem: Conv2d::new(ps, &format!("{name}.stem"), 3, c0, 7, 2, 3, rng)?,
            stem_bn: BatchNorm2d::new(ps, &format!("{name}.stem_bn"), c0)?,
            blocks,
        })
    }

    fn forward(
        &self,
        g: &mut Graph<f32>,
        ps: &ParamStore<f32>,
        x: NodeId,
        mode: Mode,
        trace: &mut Vec<(String, Vec<usize>)>,
        tag: &str,
    ) -> Result<NodeId, NnError> {
        let h = self.stem.forward(g, ps, x)?;
        let h = self.stem_bn.forward(g, ps, h, mode)?;
        let h = g.relu(h);
        let mut h = g.max_pool(h, 3, 1, 1)?;
        trace.push((format!("{tag}.input_layers"), g.value(h).shape().to_vec()));
        for b in &self.blocks {
            h = b.forward(g, ps, h, mode)?;
        }
        trace.push((format!("{tag}.blocks"), g.value(h).shape().to_vec()));
        Ok(h)
    }
}

/// Network inputs for a batch.
pub enum BatchInput {
    /// Pre-extracted crops, each `[n, 224, 224, 3]` in normalized pixel units.
    Crops { crop1: Tensor<f32>, crop2: Tensor<f32>, crop3: Tensor<f32> },
    /// Fine-scale sources (one `[1, h, w, 3]` tensor each, sizes may differ), the
    /// localization input `[n, 224, 224, 3]`, and the coarse crop.
    Stn { sources: Vec<Tensor<f32>>, localizer_input: Tensor<f32>, crop3: Tensor<f32> },
}

impl BatchInput {
    pub fn batch_size(&self) -> usize {
        match self {
            BatchInput::Crops { crop3, .. } | BatchInput::Stn { crop3, .. } => crop3.shape()[0],
        }
    }

    /// Stacks already-extracted crop sets.
    pub fn from_crop_sets(sets: &[CropSet]) -> Result<Self, NnError> {
        let stack = |f: &dyn Fn(&CropSet) -> &ImageBuffer| -> Result<Tensor<f32>, NnError> {
            let mut data = Vec::with_capacity(sets.len() * CROP_SIZE * CROP_SIZE * 3);
            for s in sets {
                let img = f(s);
                if img.width() != CROP_SIZE || img.height() != CROP_SIZE || img.channels() != 3 {
                    return Err(NnError::Shape("crops must be 224x224x3".into()));
                }
                data.extend(roi::normalize_pixels(img));
            }
            Tensor::new(vec![sets.len(), CROP_SIZE, CROP_SIZE, 3], data)
        };
        Ok(BatchInput::Crops { crop1: stack(&|s| &s.crop1)?, crop2: stack(&|s| &s.crop2)?, crop3: stack(&|s| &s.crop3)? })
    }
}

/// Node handles produced by one forward pass.
pub struct ForwardOutput {
    pub logits: [NodeId; 3],
    /// Pooled trunk features, `[n, 2048·wf]`.
    pub pooled: NodeId,
    /// Transformer parameters `[n, 3]` per fine branch when the STN strategy is active.
    pub thetas: Option<[NodeId; 2]>,
    /// Named intermediate shapes, in evaluation order.
    pub trace: Vec<(String, Vec<usize>)>,
}

/// Per-task logits for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitsTriple {
    pub artist: Vec<f32>,
    pub style: Vec<f32>,
    pub genre: Vec<f32>,
}

impl LogitsTriple {
    pub fn get(&self, task: Task) -> &[f32] {
        match task {
            Task::Artist => &self.artist,
            Task::Style => &self.style,
            Task::Genre => &self.genre,
        }
    }
}

/// Three L2-normalized per-task vectors for one painting.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTriple {
    pub artist: Vec<f32>,
    pub style: Vec<f32>,
    pub genre: Vec<f32>,
}

impl EmbeddingTriple {
    pub fn get(&self, task: Task) -> &[f32] {
        match task {
            Task::Artist => &self.artist,
            Task::Style => &self.style,
            Task::Genre => &self.genre,
        }
    }
}

/// Unit-norm copy; all-zero vectors stay zero.
pub fn l2_normalized(v: &[f32]) -> Vec<f32> {
    let norm = v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
    if norm == 0.0 {
        return v.to_vec();
    }
    v.iter().map(|&x| (x as f64 / norm) as f32).collect()
}

#[derive(Clone, Debug)]
pub struct PaintingNet {
    pub cfg: NetConfig,
    pub params: ParamStore<f32>,
    pub branches: [Branch; 3],
    pub join: ResBlock,
    pub trunk: Vec<ResBlock>,
    pub heads: [Linear; 3],
    pub localizers: Option<[Localizer; 2]>,
}

impl PaintingNet {
    pub fn build(cfg: NetConfig, seed: u64) -> Result<Self, NnError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let branches = [
            Branch::new(&mut ps, "branch1", &cfg, &mut rng)?,
            Branch::new(&mut ps, "branch2", &cfg, &mut rng)?,
            Branch::new(&mut ps, "branch3", &cfg, &mut rng)?,
        ];
        let c_branch = cfg.channels(BRANCH_CHANNELS)?;
        let join = ResBlock::new(&mut ps, "join", 3 * c_branch, c_branch, 1, &mut rng)?;
        let mut trunk = Vec::new();
        let mut cin = c_branch;
        for (stage, (&full, &depth)) in TRUNK_CHANNELS.iter().zip(&TRUNK_DEPTHS).enumerate() {
            let cout = cfg.channels(full)?;
            for i in 0..depth {
                let stride = if i == 0 { 2 } else { 1 };
                trunk.push(ResBlock::new(&mut ps, &format!("stage{}.{}", stage + 1, i), cin, cout, stride, &mut rng)?);
                cin = cout;
            }
        }
        let head_in = cfg.head_input_dim();
        let heads = [
            Linear::new(&mut ps, "head.artist", head_in, cfg.num_artist, Init::KaimingNormal { fan_in: head_in }, &mut rng)?,
            Linear::new(&mut ps, "head.style", head_in, cfg.num_style, Init::KaimingNormal { fan_in: head_in }, &mut rng)?,
            Linear::new(&mut ps, "head.genre", head_in, cfg.num_genre, Init::KaimingNormal { fan_in: head_in }, &mut rng)?,
        ];
        let localizers = match cfg.crop_strategy {
            CropStrategy::Stn => Some([
                Localizer::new(&mut ps, "stn1", cfg.width_factor, &mut rng)?,
                Localizer::new(&mut ps, "stn2", cfg.width_factor, &mut rng)?,
            ]),
            CropStrategy::Random => None,
        };
        Ok(Self { cfg, params: ps, branches, join, trunk, heads, localizers })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.trainable_count()
    }

    pub fn stn_context(&self) -> Option<roi::StnContext<'_>> {
        self.localizers.as_ref().map(|l| roi::StnContext { localizers: l, params: &self.params })
    }

    fn fine_crops_stn(
        &self,
        g: &mut Graph<f32>,
        sources: &[Tensor<f32>],
        localizer_input: &Tensor<f32>,
        mode: Mode,
    ) -> Result<([NodeId; 2], [NodeId; 2]), NnError> {
        let locs = self
            .localizers
            .as_ref()
            .ok_or_else(|| NnError::Config("network was built without localizers".into()))?;
        let n = sources.len();
        if localizer_input.shape()[0] != n {
            return Err(NnError::Shape("localizer batch does not match sources".into()));
        }
        let mut exts = Vec::with_capacity(n);
        let mut src_nodes = Vec::with_capacity(n);
        for s in sources {
            let (_, h, w, _) = s.dims4()?;
            let e = roi::extents(w, h);
            exts.push((e.0 as f32, e.1 as f32));
            src_nodes.push(g.input(s.clone(), false));
        }
        let loc_in = g.input(localizer_input.clone(), false);
        let mut crops = [loc_in; 2];
        let mut thetas = [loc_in; 2];
        for k in 0..2 {
            let raw = locs[k].forward(g, &self.params, loc_in, mode)?;
            let theta = g.constrained_affine(raw, MIN_STN_SCALE as f32, &exts)?;
            let grid = g.affine_grid(theta, CROP_SIZE, CROP_SIZE, &exts)?;
            let mut per = Vec::with_capacity(n);
            for (i, src) in src_nodes.iter().enumerate() {
                let gi = g.select_batch(grid, i)?;
                per.push(g.bilinear_sample(*src, gi)?);
            }
            crops[k] = g.concat_batch(&per)?;
            thetas[k] = theta;
        }
        Ok((crops, thetas))
    }

    /// Builds the forward graph. `injected` is `[n, inject_dim]` and is ignored when the
    /// network was configured without injection.
    pub fn forward(
        &self,
        g: &mut Graph<f32>,
        input: &BatchInput,
        injected: Option<&Tensor<f32>>,
        mode: Mode,
    ) -> Result<ForwardOutput, NnError> {
        let n = input.batch_size();
        let (c1, c2, c3, thetas) = match input {
            BatchInput::Crops { crop1, crop2, crop3 } => {
                (g.input(crop1.clone(), false), g.input(crop2.clone(), false), g.input(crop3.clone(), false), None)
            }
            BatchInput::Stn { sources, localizer_input, crop3 } => {
                let (crops, thetas) = self.fine_crops_stn(g, sources, localizer_input, mode)?;
                (crops[0], crops[1], g.input(crop3.clone(), false), Some(thetas))
            }
        };
        let mut trace = Vec::new();
        let mut outs = Vec::with_capacity(3);
        for (i, (branch, x)) in self.branches.iter().zip([c1, c2, c3]).enumerate() {
            outs.push(branch.forward(g, &self.params, x, mode, &mut trace, &format!("branch{}", i + 1))?);
        }
        let cat = g.concat_last(&outs)?;
        trace.push(("concat".into(), g.value(cat).shape().to_vec()));
        let mut h = self.join.forward(g, &self.params, cat, mode)?;
        trace.push(("join".into(), g.value(h).shape().to_vec()));
        let mut idx = 0;
        for (stage, depth) in TRUNK_DEPTHS.iter().enumerate() {
            for _ in 0..*depth {
                h = self.trunk[idx].forward(g, &self.params, h, mode)?;
                idx += 1;
            }
            trace.push((format!("stage{}", stage + 1), g.value(h).shape().to_vec()));
        }
        let pooled = g.global_avg_pool(h)?;
        trace.push(("avgpool".into(), g.value(pooled).shape().to_vec()));
        let head_in = if self.cfg.inject_dim > 0 {
            let feats = injected.ok_or_else(|| NnError::Shape("network expects injected features".into()))?;
            if feats.shape() != [n, self.cfg.inject_dim] {
                return Err(NnError::Shape(format!(
                    "injected features {:?}, expected [{n}, {}]",
                    feats.shape(),
                    self.cfg.inject_dim
                )));
            }
            let f = g.input(feats.clone(), false);
            g.concat_last(&[pooled, f])?
        } else {
            pooled
        };
        trace.push(("head_input".into(), g.value(head_in).shape().to_vec()));
        let mut logits = [head_in; 3];
        for (l, head) in logits.iter_mut().zip(&self.heads) {
            *l = head.forward(g, &self.params, head_in)?;
        }
        Ok(ForwardOutput { logits, pooled, thetas, trace })
    }

    /// Evaluation-mode logits for a batch of crop sets.
    pub fn infer(&self, sets: &[CropSet], injected: Option<&[FeatureVector]>) -> Result<Vec<LogitsTriple>, NnError> {
        let (logits, _) = self.infer_with_features(sets, injected)?;
        Ok(logits)
    }

    /// Evaluation-mode logits and pooled trunk features.
    pub fn infer_with_features(
        &self,
        sets: &[CropSet],
        injected: Option<&[FeatureVector]>,
    ) -> Result<(Vec<LogitsTriple>, Vec<Vec<f32>>), NnError> {
        if sets.is_empty() {
            return Ok((Vec::new(), Vec::new()));
        }
        let input = BatchInput::from_crop_sets(sets)?;
        let inj = match (self.cfg.inject_dim, injected) {
            (0, _) => None,
            (d, Some(fs)) => {
                let mut data = Vec::with_capacity(fs.len() * d);
                for f in fs {
                    if f.values.len() != d {
                        return Err(NnError::Shape(format!("injected {} values, expected {d}", f.values.len())));
                    }
                    data.extend(f.values.iter().map(|&v| v as f32));
                }
                Some(Tensor::new(vec![fs.len(), d], data)?)
            }
            (_, None) => return Err(NnError::Shape("network expects injected features".into())),
        };
        let mut g = Graph::new();
        let out = self.forward(&mut g, &input, inj.as_ref(), Mode::Eval)?;
        let n = sets.len();
        let rows = |id: NodeId| -> Vec<Vec<f32>> {
            let v = g.value(id);
            let k = v.len() / n;
            v.data().chunks_exact(k).map(|r| r.to_vec()).collect()
        };
        let [a, s, gn] = out.logits.map(rows);
        let logits = a
            .into_iter()
            .zip(s)
            .zip(gn)
            .map(|((artist, style), genre)| LogitsTriple { artist, style, genre })
            .collect();
        Ok((logits, rows(out.pooled)))
    }

    /// Per-task L2-normalized logits.
    pub fn embed(&self, sets: &[CropSet], injected: Option<&[FeatureVector]>) -> Result<Vec<EmbeddingTriple>, NnError> {
        Ok(self
            .infer(sets, injected)?
            .into_iter()
            .map(|l| EmbeddingTriple {
                artist: l2_normalized(&l.artist),
                style: l2_normalized(&l.style),
                genre: l2_normalized(&l.genre),
            })
            .collect())
    }

    pub fn to_checkpoint(&self, extra: serde_json::Value) -> Checkpoint {
        let meta = serde_json::json!({ "net": self.cfg, "extra": extra });
        Checkpoint::from_store(&self.params, meta)
    }

    /// Rebuilds the network described by a checkpoint and loads its tensors.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, NnError> {
        let cfg: NetConfig = serde_json::from_value(ck.meta["net"].clone())
            .map_err(|e| NnError::Checkpoint(format!("missing network config: {e}")))?;
        let mut net = Self::build(cfg, 0)?;
        ck.restore_into(&mut net.params)?;
        Ok(net)
    }
}

/// Softmax probabilities per task.
pub fn probabilities(logits: &LogitsTriple) -> [Vec<f32>; 3] {
    Task::ALL.map(|t| {
        let l = logits.get(t);
        softmax_rows(l, l.len())
    })
}

pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> NetConfig {
        NetConfig { num_artist: 5, num_style: 4, num_genre: 3, ..NetConfig::default() }
    }

    #[test]
    fn width_factor_validation() {
        let bad = NetConfig { width_factor: 1.0 / 128.0, ..small_cfg() };
        assert!(bad.validate().is_err());
        let ok = NetConfig { width_factor: 0.125, ..small_cfg() };
        ok.validate().unwrap();
        assert!(NetConfig { num_genre: 1, ..small_cfg() }.validate().is_err());
    }

    #[test]
    fn sixteenth_width_parameter_budget() {
        let net = PaintingNet::build(small_cfg(), 0).unwrap();
        let count = net.parameter_count();
        assert!(count < 5_000_000, "{count} parameters");
        // bottleneck blocks keep a quarter-width interior
        for b in net.trunk.iter().chain(std::iter::once(&net.join)) {
            assert_eq!(b.bottleneck_width() * 4, b.out_channels);
        }
    }

    #[test]
    fn argmax_prefers_first_maximum() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, -1.0]), 1);
    }

    #[test]
    fn normalization_keeps_zero() {
        assert_eq!(l2_normalized(&[0.0, 0.0]), vec![0.0, 0.0]);
        let v = l2_normalized(&[3.0, 4.0]);
        assert!((v[0] - 0.6).abs() < 1e-7 && (v[1] - 0.8).abs() < 1e-7);
    }
}
