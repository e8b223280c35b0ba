//! Multitask training, evaluation and the run configuration file.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::mpsc::sync_channel;
use std::sync::Mutex;
use std::time::Instant;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{mean_per_class_accuracy, DatasetError, ImageSource, Manifest, PaintingRecord, Split, Task};
use crate::descriptors::{self, DescriptorError, DescriptorKind, FeatureVector};
use crate::imaging::{self, AugmentConfig, ImageBuffer, ImageError, Range};
use crate::net::{argmax, BatchInput, LogitsTriple, NetConfig, PaintingNet};
use crate::nn::optim::{step_decay_lr, Sgd};
use crate::nn::{Graph, Mode, NnError, NodeId, Tensor, BN_MOMENTUM};
use crate::roi::{self, AffineParams, CropSet, CropStrategy, RoiError, COARSE_SIDE, FINE_SIDE};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config line {line}: {msg}")]
    ConfigLine { line: usize, msg: String },
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Roi(#[from] RoiError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Descriptor(#[from] DescriptorError),
    #[error("no usable training batch")]
    EmptyTraining,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Everything that defines a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Class counts are taken from the manifest at training time.
    pub net: NetConfig,
    pub augment: AugmentConfig,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Fractions of training after which the learning rate is multiplied by 0.1.
    pub lr_milestones: Vec<f64>,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// `(w_artist, w_style, w_genre)`.
    pub loss_weights: [f64; 3],
    /// Descriptor concatenated before the heads.
    pub inject: Option<DescriptorKind>,
    /// Evaluate every this many epochs (and always after the last); 0 only after the last.
    pub eval_every: usize,
    pub eval_split: Split,
    /// End training at the first evaluation where every task reaches this accuracy.
    pub stop_accuracy: Option<f64>,
    /// Estimate lighting eigen-statistics from training pixels before the first epoch.
    pub estimate_lighting: bool,
    pub lighting_sample_pixels: usize,
    /// Background loader threads; 0 prepares batches inline. Results do not depend on it.
    pub workers: usize,
    pub feature_cache_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            net: NetConfig::default(),
            augment: AugmentConfig::default(),
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_milestones: vec![0.5, 0.75],
            batch_size: 16,
            epochs: 30,
            seed: 0,
            loss_weights: [1.0, 1.0, 1.0],
            inject: None,
            eval_every: 1,
            eval_split: Split::Test,
            stop_accuracy: None,
            estimate_lighting: true,
            lighting_sample_pixels: 1_000_000,
            workers: 0,
            feature_cache_dir: None,
        }
    }
}

fn parse_list<const N: usize>(v: &str) -> Result<[f64; N], String> {
    let parts: Vec<f64> = v
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    parts.try_into().map_err(|p: Vec<f64>| format!("expected {N} comma-separated numbers, got {}", p.len()))
}

fn join(values: &[f64]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Parses the flat `key = value` format; `#` starts a comment and unknown keys are errors.
    pub fn from_kv_str(text: &str) -> Result<Self, TrainError> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| TrainError::ConfigLine { line: i + 1, msg };
            let (key, value) = line.split_once('=').ok_or_else(|| err("expected `key = value`".into()))?;
            cfg.set(key.trim(), value.trim()).map_err(err)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        Self::from_kv_str(&std::fs::read_to_string(path)?)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        fn num<T: std::str::FromStr>(v: &str) -> Result<T, String>
        where
            T::Err: std::fmt::Display,
        {
            v.parse::<T>().map_err(|e| format!("`{v}`: {e}"))
        }
        let a = &mut self.augment;
        match key {
            "width_factor" => {
                self.net.width_factor = match v.split_once('/') {
                    Some((n, d)) => num::<f64>(n.trim())? / num::<f64>(d.trim())?,
                    None => num(v)?,
                }
            }
            "crop_strategy" => self.net.crop_strategy = v.parse()?,
            "num_artist" => self.net.num_artist = num(v)?,
            "num_style" => self.net.num_style = num(v)?,
            "num_genre" => self.net.num_genre = num(v)?,
            "inject" => {
                self.inject = match v {
                    "" | "none" => None,
                    k => Some(k.parse().map_err(|e: DescriptorError| e.to_string())?),
                }
            }
            "jitter_strength" => a.jitter_strength = num(v)?,
            "blur_sigma" => a.blur_sigma = num(v)?,
            "blur_probability" => a.blur_probability = num(v)?,
            "lighting_eigvals" => a.lighting_eigvals = parse_list::<3>(v)?,
            "lighting_eigvecs" => {
                let m = parse_list::<9>(v)?;
                a.lighting_eigvecs = [[m[0], m[1], m[2]], [m[3], m[4], m[5]], [m[6], m[7], m[8]]];
            }
            "lighting_alpha_std" => a.lighting_alpha_std = num(v)?,
            "scale_range" => {
                let [lo, hi] = parse_list::<2>(v)?;
                a.scale_range = Range::new(lo, hi);
            }
            "aspect_range" => {
                let [lo, hi] = parse_list::<2>(v)?;
                a.aspect_range = Range::new(lo, hi);
            }
            "learning_rate" => self.learning_rate = num(v)?,
            "momentum" => self.momentum = num(v)?,
            "weight_decay" => self.weight_decay = num(v)?,
            "lr_milestones" => {
                self.lr_milestones = if v.is_empty() {
                    Vec::new()
                } else {
                    v.split(',').map(|p| num::<f64>(p.trim())).collect::<Result<_, _>>()?
                }
            }
            "batch_size" => self.batch_size = num(v)?,
            "epochs" => self.epochs = num(v)?,
            "seed" => self.seed = num(v)?,
            "loss_weights" => self.loss_weights = parse_list::<3>(v)?,
            "eval_every" => self.eval_every = num(v)?,
            "eval_split" => self.eval_split = v.parse()?,
            "stop_accuracy" => self.stop_accuracy = if v == "none" { None } else { Some(num(v)?) },
            "estimate_lighting" => self.estimate_lighting = num(v)?,
            "lighting_sample_pixels" => self.lighting_sample_pixels = num(v)?,
            "workers" => self.workers = num(v)?,
            "feature_cache_dir" => self.feature_cache_dir = (!v.is_empty()).then(|| PathBuf::from(v)),
            other => return Err(format!("unknown key `{other}`")),
        }
        Ok(())
    }

    /// Serializes every key in the format accepted by [`RunConfig::from_kv_str`].
    pub fn to_kv_string(&self) -> String {
        let a = &self.augment;
        let v = &a.lighting_eigvecs;
        let lines = [
            ("width_factor", self.net.width_factor.to_string()),
            ("crop_strategy", self.net.crop_strategy.to_string()),
            ("num_artist", self.net.num_artist.to_string()),
            ("num_style", self.net.num_style.to_string()),
            ("num_genre", self.net.num_genre.to_string()),
            ("inject", self.inject.map_or("none".to_string(), |k| k.to_string())),
            ("jitter_strength", a.jitter_strength.to_string()),
            ("blur_sigma", a.blur_sigma.to_string()),
            ("blur_probability", a.blur_probability.to_string()),
            ("lighting_eigvals", join(&a.lighting_eigvals)),
            ("lighting_eigvecs", join(&[v[0], v[1], v[2]].concat())),
            ("lighting_alpha_std", a.lighting_alpha_std.to_string()),
            ("scale_range", join(&[a.scale_range.min, a.scale_range.max])),
            ("aspect_range", join(&[a.aspect_range.min, a.aspect_range.max])),
            ("learning_rate", self.learning_rate.to_string()),
            ("momentum", self.momentum.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("lr_milestones", join(&self.lr_milestones)),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("seed", self.seed.to_string()),
            ("loss_weights", join(&self.loss_weights)),
            ("eval_every", self.eval_every.to_string()),
            (
                "eval_split",
                match self.eval_split {
                    Split::Train => "train",
                    Split::Test => "test",
                    Split::Unassigned => "unassigned",
                }
                .to_string(),
            ),
            ("stop_accuracy", self.stop_accuracy.map_or("none".to_string(), |a| a.to_string())),
            ("estimate_lighting", self.estimate_lighting.to_string()),
            ("lighting_sample_pixels", self.lighting_sample_pixels.to_string()),
            ("workers", self.workers.to_string()),
            (
                "feature_cache_dir",
                self.feature_cache_dir.as_ref().map_or(String::new(), |p| p.display().to_string()),
            ),
        ];
        lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2 (batch normalization)");
        }
        if self.loss_weights.iter().any(|w| !(*w >= 0.0)) || self.loss_weights.iter().all(|&w| w == 0.0) {
            return bad("loss weights must be non-negative and not all zero");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.stop_accuracy.is_some_and(|a| !(a > 0.0 && a <= 1.0)) {
            return bad("stop_accuracy must lie in (0, 1]");
        }
        self.augment.validate().map_err(|e| TrainError::Config(e.to_string()))?;
        Ok(())
    }
}

/// `Σ w_t · CE_t` over the three heads; zero-weight terms are left out of the graph.
pub fn multitask_loss(
    g: &mut Graph<f32>,
    logits: [NodeId; 3],
    labels: &[[usize; 3]],
    weights: [f64; 3],
) -> Result<NodeId, NnError> {
    let mut total: Option<NodeId> = None;
    for t in 0..3 {
        if weights[t] == 0.0 {
            continue;
        }
        let targets: Vec<usize> = labels.iter().map(|l| l[t]).collect();
        let ce = g.softmax_cross_entropy(logits[t], &targets)?;
        let term = if weights[t] == 1.0 { ce } else { g.scale(ce, weights[t] as f32) };
        total = Some(match total {
            Some(acc) => g.add(acc, term)?,
            None => term,
        });
    }
    total.ok_or_else(|| NnError::Usage("all loss weights are zero".into()))
}

/// Stable 64-bit seed derived from a painting id (FNV-1a).
pub fn id_seed(id: &str) -> u64 {
    id.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

fn sample_seed(seed: u64, epoch: usize, id: &str) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (epoch as u64).wrapping_mul(0xD1B5_4A32_D192_ED03) ^ id_seed(id)
}

/// Descriptor values per (image id, kind), memoized in memory and optionally on disk.
#[derive(Debug, Default)]
pub struct FeatureCache {
    dir: Option<PathBuf>,
    memory: Mutex<HashMap<(String, DescriptorKind), FeatureVector>>,
}

impl FeatureCache {
    pub fn new(dir: Option<PathBuf>) -> Self {
        Self { dir, memory: Mutex::new(HashMap::new()) }
    }

    fn file(&self, id: &str, kind: DescriptorKind) -> Option<PathBuf> {
        let safe: String = id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect();
        self.dir.as_ref().map(|d| d.join(kind.name()).join(format!("{safe}-{:016x}.feat", id_seed(id))))
    }

    /// Returns the cached feature or computes it from `img` (the unaugmented image).
    pub fn get_or_compute(
        &self,
        id: &str,
        kind: DescriptorKind,
        img: impl FnOnce() -> Result<ImageBuffer, TrainError>,
    ) -> Result<FeatureVector, TrainError> {
        let key = (id.to_string(), kind);
        if let Some(f) = self.memory.lock().expect("cache lock").get(&key) {
            return Ok(f.clone());
        }
        let path = self.file(id, kind);
        if let Some(p) = path.as_ref().filter(|p| p.exists()) {
            let f = std::fs::File::open(p)?;
            if let Some(feat) = descriptors::read_records(std::io::BufReader::new(f))?.pop() {
                self.memory.lock().expect("cache lock").insert(key, feat.clone());
                return Ok(feat);
            }
        }
        let feat = kind.extract(&img()?)?;
        if let Some(p) = path {
            std::fs::create_dir_all(p.parent().expect("cache file has a parent"))?;
            descriptors::write_records(std::fs::File::create(&p)?, [&feat])?;
        }
        self.memory.lock().expect("cache lock").insert(key, feat.clone());
        Ok(feat)
    }

    pub fn len(&self) -> usize {
        self.memory.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Training-time image pipeline: photometric augmentation at the fine scale, then
/// geometric jitter, keeping the shorter side at least 512.
pub fn augment_fine(img: &ImageBuffer, cfg: &AugmentConfig, rng: &mut impl rand::Rng) -> Result<ImageBuffer, TrainError> {
    let rgb = roi::ensure_rgb(img);
    let fine = imaging::resize_min_side(&rgb, FINE_SIDE)?;
    let out = imaging::photometric_augment(&fine, cfg, rng)?;
    let out = imaging::geometric_jitter(&out, cfg, rng)?;
    if out.min_side() < FINE_SIDE {
        Ok(imaging::resize_min_side(&out, FINE_SIDE)?)
    } else {
        Ok(out)
    }
}

/// One prepared training example.
enum Sample {
    Crops(CropSet),
    Stn { fine: ImageBuffer, localizer: ImageBuffer, crop3: ImageBuffer },
}

struct PreparedBatch {
    samples: Vec<Sample>,
    labels: Vec<[usize; 3]>,
    injected: Option<Tensor<f32>>,
    skipped: Vec<String>,
}

struct Preparer<'a> {
    cfg: &'a RunConfig,
    manifest: &'a Manifest,
    source: &'a dyn ImageSource,
    cache: &'a FeatureCache,
}

impl Preparer<'_> {
    fn sample(&self, r: &PaintingRecord, epoch: usize) -> Result<(Sample, [usize; 3], Option<FeatureVector>), TrainError> {
        let img = self.source.load(r)?;
        let labels = self.manifest.label_ids(r)?;
        let feat = match self.cfg.inject {
            Some(kind) => Some(self.cache.get_or_compute(&r.id, kind, || Ok(img.clone()))?),
            None => None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(self.cfg.seed, epoch, &r.id));
        let fine = augment_fine(&img, &self.cfg.augment, &mut rng)?;
        let coarse = imaging::resize_min_side(&fine, COARSE_SIDE)?;
        let sample = match self.cfg.net.crop_strategy {
            CropStrategy::Random => Sample::Crops(roi::propose_from_scales(&fine, &coarse, CropStrategy::Random, &mut rng, None)?),
            CropStrategy::Stn => {
                let crop3 = roi::random_crop(&coarse, &mut rng)?.extract(&coarse)?;
                let localizer = roi::localizer_input(&fine)?;
                Sample::Stn { fine, localizer, crop3 }
            }
        };
        Ok((sample, labels, feat))
    }

    fn batch(&self, records: &[&PaintingRecord], epoch: usize) -> PreparedBatch {
        let mut out = PreparedBatch { samples: Vec::new(), labels: Vec::new(), injected: None, skipped: Vec::new() };
        let mut feats = Vec::new();
        for r in records {
            match self.sample(r, epoch) {
                Ok((s, l, f)) => {
                    out.samples.push(s);
                    out.labels.push(l);
                    feats.extend(f);
                }
                Err(e) => {
                    log::warn!("skipping `{}`: {e}", r.id);
                    out.skipped.push(r.id.clone());
                }
            }
        }
        if !feats.is_empty() {
            let d = feats[0].dim();
            let data = feats.iter().flat_map(|f| f.values.iter().map(|&v| v as f32)).collect();
            out.injected = Tensor::new(vec![feats.len(), d], data).ok();
        }
        out
    }
}

fn batch_input(samples: &[Sample]) -> Result<BatchInput, NnError> {
    match samples.first() {
        Some(Sample::Stn { .. }) => {
            let mut sources = Vec::new();
            let mut loc = Vec::new();
            let mut c3 = Vec::new();
            for s in samples {
                if let Sample::Stn { fine, localizer, crop3 } = s {
                    sources.push(Tensor::new(vec![1, fine.height(), fine.width(), 3], roi::normalize_pixels(fine))?);
                    loc.extend(roi::normalize_pixels(localizer));
                    c3.extend(roi::normalize_pixels(crop3));
                }
            }
            let n = sources.len();
            let side = roi::LOCALIZER_INPUT;
            Ok(BatchInput::Stn {
                sources,
                localizer_input: Tensor::new(vec![n, side, side, 3], loc)?,
                crop3: Tensor::new(vec![n, roi::CROP_SIZE, roi::CROP_SIZE, 3], c3)?,
            })
        }
        _ => {
            let sets: Vec<CropSet> = samples
                .iter()
                .filter_map(|s| match s {
                    Sample::Crops(c) => Some(c.clone()),
                    Sample::Stn { .. } => None,
                })
                .collect();
            BatchInput::from_crop_sets(&sets)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub learning_rate: f64,
    pub mean_loss: f64,
    pub steps: usize,
    pub skipped: usize,
    pub seconds: f64,
    pub eval: Option<[f64; 4]>,
}

/// Observes every optimization step (for diagnostics and tests).
pub trait TrainObserver {
    fn on_step(&mut self, _epoch: usize, _loss: f64, _transforms: &[AffineParams]) {}
    fn on_epoch(&mut self, _log: &EpochLog) {}
}

impl TrainObserver for () {}

pub struct TrainOutcome {
    pub net: PaintingNet,
    pub best: Option<PaintingNet>,
    pub best_average: f64,
    pub history: Vec<EpochLog>,
    pub last_report: Option<EvalReport>,
}

/// Network configuration for a manifest: class counts and injection width filled in.
pub fn net_config_for(cfg: &RunConfig, manifest: &Manifest) -> NetConfig {
    let [a, s, g] = manifest.num_classes();
    NetConfig {
        num_artist: a,
        num_style: s,
        num_genre: g,
        inject_dim: cfg.inject.map_or(0, DescriptorKind::dim),
        ..cfg.net.clone()
    }
}

fn checkpoint_meta(cfg: &RunConfig, manifest: &Manifest, epoch: usize, report: Option<&EvalReport>) -> serde_json::Value {
    serde_json::json!({
        "run_config": cfg.to_kv_string(),
        "inject": cfg.inject,
        "labels": manifest.labels,
        "epoch": epoch,
        "eval": report.map(|r| r.row()),
    })
}

/// Trains a network on the train split of `manifest`.
///
/// Each step: augment, propose crops, optionally attach cached descriptors, forward,
/// weighted multitask loss, backward, SGD update. When `out_dir` is set, `best.ckpt`
/// holds the best-average model, `last.ckpt` the final one, and `train_log.jsonl` one
/// line per epoch.
pub fn train(
    cfg: &RunConfig,
    manifest: &Manifest,
    source: &dyn ImageSource,
    out_dir: Option<&Path>,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let mut cfg = cfg.clone();
    let train_set: Vec<&PaintingRecord> = manifest.split(Split::Train);
    if train_set.len() < 2 {
        return Err(TrainError::EmptyTraining);
    }
    if cfg.estimate_lighting && cfg.augment.lighting_alpha_std > 0.0 && cfg.augment.lighting_eigvals == [0.0; 3] {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x11);
        let picks: Vec<ImageBuffer> = train_set
            .choose_multiple(&mut rng, train_set.len().min(32))
            .filter_map(|r| source.load(r).ok())
            .collect();
        let (vals, vecs) = imaging::estimate_lighting(&picks, cfg.lighting_sample_pixels, &mut rng);
        cfg.augment.lighting_eigvals = vals;
        cfg.augment.lighting_eigvecs = vecs;
        log::info!("lighting eigenvalues {:?}", cfg.augment.lighting_eigvals);
    }
    let net_cfg = net_config_for(&cfg, manifest);
    let mut net = PaintingNet::build(net_cfg, cfg.seed)?;
    let mut opt = Sgd::new(cfg.momentum as f32, cfg.weight_decay as f32);
    let cache = FeatureCache::new(cfg.feature_cache_dir.clone());
    let prep = Preparer { cfg: &cfg, manifest, source, cache: &cache };
    if let Some(d) = out_dir {
        std::fs::create_dir_all(d)?;
        std::fs::write(d.join("run.cfg"), cfg.to_kv_string())?;
    }
    let mut history = Vec::new();
    let mut best = None;
    let mut best_average = f64::NEG_INFINITY;
    let mut last_report = None;
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let lr = step_decay_lr(cfg.learning_rate as f32, epoch, cfg.epochs, &cfg.lr_milestones);
        let mut order = train_set.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64 * 7919)));
        // a trailing single-image batch cannot be normalized; fold it into the previous one
        let mut chunks: Vec<Vec<&PaintingRecord>> = order.chunks(cfg.batch_size).map(|c| c.to_vec()).collect();
        if chunks.len() > 1 && chunks.last().is_some_and(|c| c.len() < 2) {
            let tail = chunks.pop().expect("non-empty");
            chunks.last_mut().expect("non-empty").extend(tail);
        }
        let mut loss_sum = 0.0;
        let mut steps = 0;
        let mut skipped = 0;
        let mut step = |batch: PreparedBatch, net: &mut PaintingNet| -> Result<(), TrainError> {
            skipped += batch.skipped.len();
            if batch.samples.len() < 2 {
                return Ok(());
            }
            let input = batch_input(&batch.samples)?;
            let mut g = Graph::new();
            let out = net.forward(&mut g, &input, batch.injected.as_ref(), Mode::Train)?;
            let loss = multitask_loss(&mut g, out.logits, &batch.labels, cfg.loss_weights)?;
            let value = g.value(loss).data()[0] as f64;
            if !value.is_finite() {
                return Err(NnError::Numeric(format!("loss became {value} in epoch {epoch}")).into());
            }
            g.backward(loss)?;
            net.params.zero_grad();
            net.params.accumulate_grads(&g);
            net.params.commit_running_stats(&mut g, BN_MOMENTUM);
            opt.step(&mut net.params, lr);
            let transforms: Vec<AffineParams> = out
                .thetas
                .iter()
                .flat_map(|ts| ts.iter())
                .flat_map(|&t| {
                    g.value(t)
                        .data()
                        .chunks_exact(3)
                        .map(|v| AffineParams { s: v[0] as f64, tx: v[1] as f64, ty: v[2] as f64 })
                        .collect::<Vec<_>>()
                })
                .collect();
            observer.on_step(epoch, value, &transforms);
            loss_sum += value;
            steps += 1;
            Ok(())
        };
        if cfg.workers == 0 {
            for c in &chunks {
                step(prep.batch(c, epoch), &mut net)?;
            }
        } else {
            std::thread::scope(|scope| -> Result<(), TrainError> {
                let (tx, rx) = sync_channel::<PreparedBatch>(cfg.workers + 1);
                let prep = &prep;
                let chunks = &chunks;
                scope.spawn(move || {
                    for c in chunks {
                        if tx.send(prep.batch(c, epoch)).is_err() {
                            break;
                        }
                    }
                });
                for batch in rx {
                    step(batch, &mut net)?;
                }
                Ok(())
            })?;
        }
        if steps == 0 {
            return Err(TrainError::EmptyTraining);
        }
        let last = epoch + 1 == cfg.epochs;
        let due = last || (cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0);
        let report = if due {
            let r = evaluate(&net, manifest, source, cfg.eval_split, cfg.inject.map(|k| (k, &cache)))?;
            Some(r)
        } else {
            None
        };
        let log_entry = EpochLog {
            epoch,
            learning_rate: lr as f64,
            mean_loss: loss_sum / steps as f64,
            steps,
            skipped,
            seconds: start.elapsed().as_secs_f64(),
            eval: report.as_ref().map(|r| r.row()),
        };
        log::info!(
            "epoch {epoch}: loss {:.4} lr {lr:.4} ({:.1}s){}",
            log_entry.mean_loss,
            log_entry.seconds,
            report.as_ref().map_or(String::new(), |r| format!(" eval {}", r.table_row()))
        );
        observer.on_epoch(&log_entry);
        if let Some(d) = out_dir {
            use std::io::Write;
            let mut f = std::fs::OpenOptions::new().create(true).append(true).open(d.join("train_log.jsonl"))?;
            writeln!(f, "{}", serde_json::to_string(&log_entry).expect("log serializes"))?;
        }
        history.push(log_entry);
        let stop = report
            .as_ref()
            .zip(cfg.stop_accuracy)
            .is_some_and(|(r, target)| r.accuracy.iter().all(|&a| a >= target));
        if let Some(r) = report {
            if r.average > best_average {
                best_average = r.average;
                best = Some(net.clone());
                if let Some(d) = out_dir {
                    net.to_checkpoint(checkpoint_meta(&cfg, manifest, epoch, Some(&r))).save(&d.join("best.ckpt"))?;
                }
            }
            last_report = Some(r);
        }
        if stop {
            log::info!("every task reached the target accuracy after epoch {epoch}");
            break;
        }
    }
    if let Some(d) = out_dir {
        let final_epoch = history.last().map_or(0, |l| l.epoch);
        net.to_checkpoint(checkpoint_meta(&cfg, manifest, final_epoch, last_report.as_ref()))
            .save(&d.join("last.ckpt"))?;
    }
    Ok(TrainOutcome { net, best, best_average, history, last_report })
}

/// Per-task accuracies plus the diagnostics behind them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean per-class accuracy for artist, style and genre.
    pub accuracy: [f64; 3],
    /// Arithmetic mean of the three accuracies.
    pub average: f64,
    /// `confusion[t][truth][predicted]`.
    pub confusion: [Vec<Vec<usize>>; 3],
    pub misclassified: [Vec<String>; 3],
    pub correct: [Vec<String>; 3],
}

impl EvalReport {
    /// A report carrying only accuracies.
    pub fn from_accuracies(accuracy: [f64; 3]) -> Self {
        Self {
            accuracy,
            average: accuracy.iter().sum::<f64>() / 3.0,
            confusion: Default::default(),
            misclassified: Default::default(),
            correct: Default::default(),
        }
    }

    pub fn from_predictions(
        ids: &[String],
        truth: &[[usize; 3]],
        predicted: &[[usize; 3]],
        classes: [usize; 3],
    ) -> Result<Self, DatasetError> {
        let mut accuracy = [0.0; 3];
        let mut confusion: [Vec<Vec<usize>>; 3] = Default::default();
        let mut misclassified: [Vec<String>; 3] = Default::default();
        let mut correct: [Vec<String>; 3] = Default::default();
        for t in 0..3 {
            let y: Vec<usize> = truth.iter().map(|l| l[t]).collect();
            let p: Vec<usize> = predicted.iter().map(|l| l[t]).collect();
            accuracy[t] = mean_per_class_accuracy(&p, &y, classes[t])?;
            confusion[t] = vec![vec![0; classes[t]]; classes[t]];
            for (i, (&yy, &pp)) in y.iter().zip(&p).enumerate() {
                if pp < classes[t] {
                    confusion[t][yy][pp] += 1;
                }
                if yy == pp {
                    correct[t].push(ids[i].clone());
                } else {
                    misclassified[t].push(ids[i].clone());
                }
            }
        }
        Ok(Self { average: accuracy.iter().sum::<f64>() / 3.0, accuracy, confusion, misclassified, correct })
    }

    /// `[artist, style, genre, average]`.
    pub fn row(&self) -> [f64; 4] {
        [self.accuracy[0], self.accuracy[1], self.accuracy[2], self.average]
    }

    /// Percentages with one decimal: `artist | style | genre | average`.
    pub fn table_row(&self) -> String {
        self.row().iter().map(|v| format!("{:.1}", v * 100.0)).collect::<Vec<_>>().join(" | ")
    }
}

/// Network outputs for one painting.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub id: String,
    pub truth: [usize; 3],
    pub logits: LogitsTriple,
    /// Pooled trunk features (before injection and heads).
    pub pooled: Vec<f32>,
}

impl Prediction {
    pub fn predicted(&self) -> [usize; 3] {
        Task::ALL.map(|t| argmax(self.logits.get(t)))
    }
}

/// Fixed proposal for inference: no augmentation, crop positions seeded by the id.
pub fn eval_crops(net: &PaintingNet, id: &str, img: &ImageBuffer) -> Result<CropSet, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(id_seed(id));
    Ok(roi::propose(img, net.cfg.crop_strategy, &mut rng, net.stn_context())?)
}

const EVAL_BATCH: usize = 16;

/// Runs the network over `records` with deterministic crops. Unreadable images are skipped.
pub fn predict(
    net: &PaintingNet,
    manifest: &Manifest,
    source: &dyn ImageSource,
    records: &[&PaintingRecord],
    inject: Option<(DescriptorKind, &FeatureCache)>,
) -> Result<Vec<Prediction>, TrainError> {
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(EVAL_BATCH) {
        let mut sets = Vec::new();
        let mut feats = Vec::new();
        let mut kept = Vec::new();
        for r in chunk {
            let img = match source.load(r) {
                Ok(i) => i,
                Err(e) => {
                    log::warn!("skipping `{}`: {e}", r.id);
                    continue;
                }
            };
            if let Some((kind, cache)) = inject {
                feats.push(cache.get_or_compute(&r.id, kind, || Ok(img.clone()))?);
            }
            sets.push(eval_crops(net, &r.id, &img)?);
            kept.push(*r);
        }
        let (logits, pooled) = net.infer_with_features(&sets, inject.map(|_| feats.as_slice()))?;
        for ((r, l), p) in kept.into_iter().zip(logits).zip(pooled) {
            out.push(Prediction { id: r.id.clone(), truth: manifest.label_ids(r)?, logits: l, pooled: p });
        }
    }
    Ok(out)
}

pub fn report_from_predictions(preds: &[Prediction], classes: [usize; 3]) -> Result<EvalReport, TrainError> {
    let ids: Vec<String> = preds.iter().map(|p| p.id.clone()).collect();
    let truth: Vec<[usize; 3]> = preds.iter().map(|p| p.truth).collect();
    let predicted: Vec<[usize; 3]> = preds.iter().map(Prediction::predicted).collect();
    Ok(EvalReport::from_predictions(&ids, &truth, &predicted, classes)?)
}

/// Mean per-class accuracy of `net` on one split.
pub fn evaluate(
    net: &PaintingNet,
    manifest: &Manifest,
    source: &dyn ImageSource,
    split: Split,
    inject: Option<(DescriptorKind, &FeatureCache)>,
) -> Result<EvalReport, TrainError> {
    let records = manifest.split(split);
    let preds = predict(net, manifest, source, &records, inject)?;
    report_from_predictions(&preds, manifest.num_classes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    #[test]
    fn config_round_trips_through_text() {
        let mut cfg = RunConfig { inject: Some(DescriptorKind::Hog), epochs: 3, ..RunConfig::default() };
        cfg.loss_weights = [1.0, 0.0, 0.5];
        cfg.net.crop_strategy = CropStrategy::Stn;
        let text = cfg.to_kv_string();
        assert_eq!(RunConfig::from_kv_str(&text).unwrap(), cfg);
        let parsed = RunConfig::from_kv_str("# comment\nwidth_factor = 1/8\nepochs=2\n").unwrap();
        assert_eq!(parsed.net.width_factor, 0.125);
        assert_eq!(parsed.epochs, 2);
    }

    #[test]
    fn config_errors_name_the_line() {
        match RunConfig::from_kv_str("epochs = 3\nbogus = 1\n") {
            Err(TrainError::ConfigLine { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(RunConfig::from_kv_str("loss_weights = 0,0,0\n").is_err());
        assert!(RunConfig::from_kv_str("batch_size = 1\n").is_err());
        assert!(RunConfig::from_kv_str("inject = cedd\n").is_err());
    }

    fn logits_graph(values: &[[f32; 4]; 3], n: usize) -> (Graph<f32>, [NodeId; 3]) {
        let mut g = Graph::new();
        let ids = values.map(|row| {
            let data: Vec<f32> = (0..n).flat_map(|_| row.iter().copied()).collect();
            g.input(Tensor::new(vec![n, 4], data).unwrap(), true)
        });
        (g, ids)
    }

    #[test]
    fn uniform_logits_give_three_ln_k() {
        let (mut g, ids) = logits_graph(&[[0.0; 4]; 3], 2);
        let l = multitask_loss(&mut g, ids, &[[0, 1, 2], [3, 3, 3]], [1.0; 3]).unwrap();
        assert!((g.value(l).data()[0] as f64 - 3.0 * 4f64.ln()).abs() < 1e-5);
    }

    #[test]
    fn single_weight_equals_single_head() {
        let vals = [[0.3, -1.0, 2.0, 0.1], [1.0, 1.0, 0.0, -2.0], [0.5, 0.5, 0.5, 3.0]];
        let (mut g, ids) = logits_graph(&vals, 3);
        let labels = [[2, 0, 3], [1, 1, 1], [0, 2, 3]];
        let l = multitask_loss(&mut g, ids, &labels, [1.0, 0.0, 0.0]).unwrap();
        let ce = g.softmax_cross_entropy(ids[0], &[2, 1, 0]).unwrap();
        assert_eq!(g.value(l).data()[0], g.value(ce).data()[0]);
        g.backward(l).unwrap();
        assert!(g.grad(ids[1]).is_none_or(|gr| gr.iter().all(|&v| v == 0.0)));
        assert!(multitask_loss(&mut g, ids, &labels, [0.0; 3]).is_err());
    }

    #[test]
    fn report_average_and_stub_row() {
        let r = EvalReport::from_accuracies([0.565, 0.572, 0.636]);
        assert_eq!(r.table_row(), "56.5 | 57.2 | 63.6 | 59.1");
        assert!((r.average - (0.565 + 0.572 + 0.636) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn report_partitions_ids() {
        let ids: Vec<String> = (0..4).map(|i| i.to_string()).collect();
        let truth = [[0, 0, 0], [1, 1, 0], [1, 0, 1], [0, 1, 1]];
        let pred = [[0, 0, 0], [0, 1, 0], [1, 1, 1], [0, 1, 0]];
        let r = EvalReport::from_predictions(&ids, &truth, &pred, [2, 2, 2]).unwrap();
        for t in 0..3 {
            let mut all: Vec<_> = r.misclassified[t].iter().chain(&r.correct[t]).cloned().collect();
            all.sort();
            assert_eq!(all, ids);
        }
        assert_eq!(r.accuracy[0], 0.75);
        let perfect = EvalReport::from_predictions(&ids, &truth, &truth, [2, 2, 2]).unwrap();
        assert_eq!(perfect.row(), [1.0; 4]);
    }
}
