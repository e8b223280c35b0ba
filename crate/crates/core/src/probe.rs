//! Linear probes on fixed features and the residual-error analysis of a network.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{mean_per_class_accuracy, DatasetError, ImageSource, Manifest, PaintingRecord, Split, Task};
use crate::descriptors::{DescriptorError, DescriptorKind};
use crate::net::PaintingNet;
use crate::train::{self, FeatureCache, Prediction};

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("no training examples")]
    Empty,
    #[error("feature rows have inconsistent dimensions ({0} vs {1})")]
    Dim(usize, usize),
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error(transparent)]
    Descriptor(#[from] DescriptorError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("{0}")]
    Other(String),
}

/// L2 penalties tried on the internal validation split.
pub const LAMBDA_GRID: [f64; 3] = [1e-4, 1e-3, 1e-2];
/// Share of the training rows used for fitting while choosing the penalty.
pub const INNER_TRAIN_FRACTION: f64 = 0.9;
pub const MAX_ITERS: usize = 400;

/// Per-feature standardization fitted on training rows; constant features get unit scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &[Vec<f64>]) -> Result<Self, ProbeError> {
        let d = check_dims(x)?;
        let n = x.len() as f64;
        let mut mean = vec![0.0; d];
        for row in x {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; d];
        for row in x {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        let scale = var.into_iter().map(|v| if v > 1e-24 { v.sqrt() } else { 1.0 }).collect();
        Ok(Self { mean, scale })
    }

    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) / s).collect()
    }
}

fn check_dims(x: &[Vec<f64>]) -> Result<usize, ProbeError> {
    let d = x.first().ok_or(ProbeError::Empty)?.len();
    match x.iter().find(|r| r.len() != d) {
        Some(r) => Err(ProbeError::Dim(d, r.len())),
        None => Ok(d),
    }
}

/// Multinomial logistic regression on standardized inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticRegression {
    pub classes: usize,
    pub lambda: f64,
    pub standardizer: Standardizer,
    /// Row-major `classes × dim`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Mean cross-entropy plus `λ/2·‖W‖²` and its gradient with respect to `(W, b)`.
pub fn objective(
    x: &[Vec<f64>],
    y: &[usize],
    classes: usize,
    lambda: f64,
    weights: &[f64],
    bias: &[f64],
) -> (f64, Vec<f64>, Vec<f64>) {
    let d = weights.len() / classes.max(1);
    let n = x.len() as f64;
    let mut gw = vec![0.0; weights.len()];
    let mut gb = vec![0.0; classes];
    let mut loss = 0.0;
    let mut z = vec![0.0; classes];
    for (row, &label) in x.iter().zip(y) {
        for c in 0..classes {
            z[c] = bias[c] + weights[c * d..(c + 1) * d].iter().zip(row).map(|(w, v)| w * v).sum::<f64>();
        }
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = z.iter().map(|v| (v - m).exp()).sum();
        loss += (m + sum.ln() - z[label]) / n;
        for c in 0..classes {
            let p = (z[c] - m).exp() / sum;
            let delta = (p - if c == label { 1.0 } else { 0.0 }) / n;
            gb[c] += delta;
            for (g, v) in gw[c * d..(c + 1) * d].iter_mut().zip(row) {
                *g += delta * v;
            }
        }
    }
    for (g, w) in gw.iter_mut().zip(weights) {
        loss += 0.5 * lambda * w * w;
        *g += lambda * w;
    }
    (loss, gw, gb)
}

impl LogisticRegression {
    /// Full-batch gradient descent with Armijo backtracking, starting from zero weights.
    pub fn fit(x: &[Vec<f64>], y: &[usize], classes: usize, lambda: f64) -> Result<Self, ProbeError> {
        let d = check_dims(x)?;
        if let Some(&label) = y.iter().find(|&&l| l >= classes) {
            return Err(ProbeError::Label { label, classes });
        }
        if x.len() != y.len() {
            return Err(ProbeError::Other(format!("{} rows but {} labels", x.len(), y.len())));
        }
        let standardizer = Standardizer::fit(x)?;
        let xs: Vec<Vec<f64>> = x.iter().map(|r| standardizer.apply(r)).collect();
        let mut w = vec![0.0; classes * d];
        let mut b = vec![0.0; classes];
        let mut step = 1.0;
        let (mut loss, mut gw, mut gb) = objective(&xs, y, classes, lambda, &w, &b);
        for _ in 0..MAX_ITERS {
            let gnorm2: f64 = gw.iter().chain(&gb).map(|g| g * g).sum();
            if gnorm2.sqrt() < 1e-6 {
                break;
            }
            let mut accepted = false;
            for _ in 0..40 {
                let nw: Vec<f64> = w.iter().zip(&gw).map(|(a, g)| a - step * g).collect();
                let nb: Vec<f64> = b.iter().zip(&gb).map(|(a, g)| a - step * g).collect();
                let (nl, ngw, ngb) = objective(&xs, y, classes, lambda, &nw, &nb);
                if nl <= loss - 0.5 * step * gnorm2 {
                    (w, b, loss, gw, gb) = (nw, nb, nl, ngw, ngb);
                    accepted = true;
                    step *= 1.5;
                    break;
                }
                step *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        Ok(Self { classes, lambda, standardizer, weights: w, bias: b })
    }

    pub fn dim(&self) -> usize {
        self.standardizer.mean.len()
    }

    pub fn scores(&self, row: &[f64]) -> Vec<f64> {
        let r = self.standardizer.apply(row);
        let d = self.dim();
        (0..self.classes)
            .map(|c| self.bias[c] + self.weights[c * d..(c + 1) * d].iter().zip(&r).map(|(w, v)| w * v).sum::<f64>())
            .collect()
    }

    /// Highest-scoring class; the lowest index wins ties.
    pub fn predict(&self, row: &[f64]) -> usize {
        let s = self.scores(row);
        let mut best = 0;
        for (i, v) in s.iter().enumerate() {
            if *v > s[best] {
                best = i;
            }
        }
        best
    }
}

/// Chooses λ from [`LAMBDA_GRID`] on a seeded 90/10 split of the training rows, then refits
/// on all of them.
pub fn fit_probe(x: &[Vec<f64>], y: &[usize], classes: usize, seed: u64) -> Result<LogisticRegression, ProbeError> {
    if x.is_empty() {
        return Err(ProbeError::Empty);
    }
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = ((x.len() as f64 * INNER_TRAIN_FRACTION).round() as usize).clamp(1, x.len());
    let (fit_idx, val_idx) = order.split_at(cut);
    let pick = |idx: &[usize]| -> (Vec<Vec<f64>>, Vec<usize>) { (idx.iter().map(|&i| x[i].clone()).collect(), idx.iter().map(|&i| y[i]).collect()) };
    let mut lambda = LAMBDA_GRID[0];
    if !val_idx.is_empty() {
        let (fx, fy) = pick(fit_idx);
        let (vx, vy) = pick(val_idx);
        let mut best = f64::NEG_INFINITY;
        for &l in &LAMBDA_GRID {
            let m = LogisticRegression::fit(&fx, &fy, classes, l)?;
            let pred: Vec<usize> = vx.iter().map(|r| m.predict(r)).collect();
            let acc = mean_per_class_accuracy(&pred, &vy, classes)?;
            if acc > best {
                best = acc;
                lambda = l;
            }
        }
    }
    LogisticRegression::fit(x, y, classes, lambda)
}

/// Result of probing one feature set on one task.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProbeResult {
    pub task: Task,
    pub accuracy: f64,
    pub lambda: f64,
    /// `(painting id, predicted class)` for every test row.
    pub predictions: Vec<(String, usize)>,
}

/// Fits on the train rows and scores mean per-class accuracy on the test rows.
pub fn probe_features(
    task: Task,
    train: (&[Vec<f64>], &[usize]),
    test: (&[String], &[Vec<f64>], &[usize]),
    classes: usize,
    seed: u64,
) -> Result<ProbeResult, ProbeError> {
    let model = fit_probe(train.0, train.1, classes, seed)?;
    let pred: Vec<usize> = test.1.iter().map(|r| model.predict(r)).collect();
    let accuracy = mean_per_class_accuracy(&pred, test.2, classes)?;
    Ok(ProbeResult {
        task,
        accuracy,
        lambda: model.lambda,
        predictions: test.0.iter().cloned().zip(pred).collect(),
    })
}

type Rows = (Vec<String>, Vec<Vec<f64>>, Vec<usize>);

fn descriptor_rows(
    kind: DescriptorKind,
    manifest: &Manifest,
    source: &dyn ImageSource,
    records: &[&PaintingRecord],
    task: Task,
    cache: &FeatureCache,
) -> Result<Rows, ProbeError> {
    let mut out: Rows = Default::default();
    for r in records {
        let feat = cache.get_or_compute(&r.id, kind, || Ok(source.load(r)?));
        let feat = match feat {
            Ok(f) => f,
            Err(crate::train::TrainError::Dataset(e)) => {
                log::warn!("skipping `{}`: {e}", r.id);
                continue;
            }
            Err(e) => return Err(ProbeError::Other(e.to_string())),
        };
        out.0.push(r.id.clone());
        out.1.push(feat.values);
        out.2.push(manifest.label_ids(r)?[task.index()]);
    }
    Ok(out)
}

/// Extracts `kind` for every train and test painting and probes it on `task`.
pub fn linear_probe(
    kind: DescriptorKind,
    manifest: &Manifest,
    source: &dyn ImageSource,
    task: Task,
    cache: &FeatureCache,
    seed: u64,
) -> Result<ProbeResult, ProbeError> {
    let train = descriptor_rows(kind, manifest, source, &manifest.split(Split::Train), task, cache)?;
    let test = descriptor_rows(kind, manifest, source, &manifest.split(Split::Test), task, cache)?;
    probe_features(task, (&train.1, &train.2), (&test.0, &test.1, &test.2), manifest.num_classes()[task.index()], seed)
}

/// Probes the pooled trunk features of a trained network (before injection and heads).
pub fn pooled_probe(
    net: &PaintingNet,
    manifest: &Manifest,
    source: &dyn ImageSource,
    task: Task,
    inject: Option<(DescriptorKind, &FeatureCache)>,
    seed: u64,
) -> Result<ProbeResult, ProbeError> {
    let rows = |split: Split| -> Result<Rows, ProbeError> {
        let preds = train::predict(net, manifest, source, &manifest.split(split), inject).map_err(|e| ProbeError::Other(e.to_string()))?;
        Ok(pooled_rows(&preds, task))
    };
    let train = rows(Split::Train)?;
    let test = rows(Split::Test)?;
    probe_features(task, (&train.1, &train.2), (&test.0, &test.1, &test.2), manifest.num_classes()[task.index()], seed)
}

/// `(ids, pooled features, labels for task)` from network predictions.
pub fn pooled_rows(preds: &[Prediction], task: Task) -> (Vec<String>, Vec<Vec<f64>>, Vec<usize>) {
    (
        preds.iter().map(|p| p.id.clone()).collect(),
        preds.iter().map(|p| p.pooled.iter().map(|&v| v as f64).collect()).collect(),
        preds.iter().map(|p| p.truth[task.index()]).collect(),
    )
}

/// How many network mistakes one probe gets right.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Recovery {
    pub probe: String,
    pub per_task: [usize; 3],
    pub total: usize,
}

/// Network predictions and ground truth over a test set, per task.
#[derive(Clone, Debug, Default)]
pub struct NetworkOutcomes {
    pub truth: [HashMap<String, usize>; 3],
    pub predicted: [HashMap<String, usize>; 3],
}

impl NetworkOutcomes {
    pub fn errors(&self, task: Task) -> Vec<&String> {
        let t = task.index();
        let mut ids: Vec<&String> = self.predicted[t]
            .iter()
            .filter(|(id, p)| self.truth[t].get(*id) != Some(p))
            .map(|(id, _)| id)
            .collect();
        ids.sort();
        ids
    }

    pub fn error_counts(&self) -> [usize; 3] {
        Task::ALL.map(|t| self.errors(t).len())
    }
}

impl NetworkOutcomes {
    pub fn from_predictions(preds: &[Prediction]) -> Self {
        let mut out = Self::default();
        for p in preds {
            let predicted = p.predicted();
            for t in 0..3 {
                out.truth[t].insert(p.id.clone(), p.truth[t]);
                out.predicted[t].insert(p.id.clone(), predicted[t]);
            }
        }
        out
    }
}

/// Probe predictions as an id map for one task slot, the others empty.
pub fn probe_maps(result: &ProbeResult) -> [HashMap<String, usize>; 3] {
    let mut maps: [HashMap<String, usize>; 3] = Default::default();
    maps[result.task.index()] = result.predictions.iter().cloned().collect();
    maps
}

/// For each probe, counts the network-misclassified items (per task) that the probe
/// classifies correctly. `probes[i].1[t]` maps ids to the probe's prediction for task `t`;
/// tasks a probe was not run on are empty maps.
pub fn residual_error_analysis(net: &NetworkOutcomes, probes: &[(String, [HashMap<String, usize>; 3])]) -> Vec<Recovery> {
    probes
        .iter()
        .map(|(name, preds)| {
            let per_task = Task::ALL.map(|t| {
                let i = t.index();
                net.errors(t).into_iter().filter(|id| preds[i].get(*id).is_some() && preds[i].get(*id) == net.truth[i].get(*id)).count()
            });
            Recovery { probe: name.clone(), total: per_task.iter().sum(), per_task }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn blobs(n: usize, k: usize, d: usize, sep: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let c = i % k;
            x.push((0..d).map(|j| if j % k == c { sep } else { 0.0 } + rng.random_range(-0.5..0.5)).collect());
            y.push(c);
        }
        (x, y)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (x, y) = blobs(12, 3, 4, 1.0, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (_, gw, gb) = objective(&x, &y, 3, 0.1, &w, &b);
        let h = 1e-6;
        for i in 0..w.len() {
            let mut p = w.clone();
            p[i] += h;
            let mut m = w.clone();
            m[i] -= h;
            let fd = (objective(&x, &y, 3, 0.1, &p, &b).0 - objective(&x, &y, 3, 0.1, &m, &b).0) / (2.0 * h);
            assert!((fd - gw[i]).abs() < 1e-7, "w{i}: {fd} vs {}", gw[i]);
        }
        for i in 0..3 {
            let mut p = b.clone();
            p[i] += h;
            let mut m = b.clone();
            m[i] -= h;
            let fd = (objective(&x, &y, 3, 0.1, &w, &p).0 - objective(&x, &y, 3, 0.1, &w, &m).0) / (2.0 * h);
            assert!((fd - gb[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn separable_features_are_learned_perfectly() {
        let (x, y) = blobs(90, 3, 6, 3.0, 3);
        let (tx, ty) = blobs(30, 3, 6, 3.0, 4);
        let ids: Vec<String> = (0..30).map(|i| i.to_string()).collect();
        let r = probe_features(Task::Style, (&x, &y), (&ids, &tx, &ty), 3, 0).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert!(LAMBDA_GRID.contains(&r.lambda));
    }

    #[test]
    fn constant_features_do_not_break_standardization() {
        let x = vec![vec![1.0, 0.0], vec![1.0, 1.0], vec![1.0, 0.0], vec![1.0, 1.0]];
        let m = LogisticRegression::fit(&x, &[0, 1, 0, 1], 2, 1e-4).unwrap();
        assert!(m.weights.iter().all(|w| w.is_finite()));
        assert_eq!(m.predict(&[1.0, 1.0]), 1);
        assert!(matches!(LogisticRegression::fit(&x, &[0, 2, 0, 1], 2, 1e-4), Err(ProbeError::Label { .. })));
    }

    fn outcomes(truth: &[usize], pred: &[usize]) -> NetworkOutcomes {
        let mut o = NetworkOutcomes::default();
        for (i, (&t, &p)) in truth.iter().zip(pred).enumerate() {
            for k in 0..3 {
                o.truth[k].insert(i.to_string(), t);
                o.predicted[k].insert(i.to_string(), p);
            }
        }
        o
    }

    fn as_maps(pred: &[usize]) -> [HashMap<String, usize>; 3] {
        let m: HashMap<String, usize> = pred.iter().enumerate().map(|(i, &p)| (i.to_string(), p)).collect();
        [m.clone(), m.clone(), m]
    }

    #[test]
    fn recovery_counts_hand_enumerated() {
        let truth = [0, 1, 2, 0, 1, 2];
        let net = [0, 0, 0, 1, 1, 2]; // wrong on 1, 2, 3
        let o = outcomes(&truth, &net);
        assert_eq!(o.error_counts(), [3; 3]);
        let probes = vec![
            ("same".to_string(), as_maps(&net)),
            ("oracle".to_string(), as_maps(&truth)),
            ("disjoint".to_string(), as_maps(&[1, 1, 0, 0, 0, 0])), // right on 1 and 3 only among errors
        ];
        let r = residual_error_analysis(&o, &probes);
        assert_eq!(r[0].per_task, [0; 3]);
        assert_eq!(r[1].per_task, [3; 3]);
        assert_eq!(r[1].total, 9);
        assert_eq!(r[2].per_task, [2; 3]);
    }

    #[test]
    fn recovery_bounded_by_error_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let truth: Vec<usize> = (0..20).map(|_| rng.random_range(0..4)).collect();
            let net: Vec<usize> = (0..20).map(|_| rng.random_range(0..4)).collect();
            let probe: Vec<usize> = (0..20).map(|_| rng.random_range(0..4)).collect();
            let o = outcomes(&truth, &net);
            let r = residual_error_analysis(&o, &[("p".into(), as_maps(&probe))]);
            let brute = (0..20).filter(|&i| net[i] != truth[i] && probe[i] == truth[i]).count();
            assert_eq!(r[0].per_task, [brute; 3]);
            assert!(brute <= o.error_counts()[0]);
        }
    }
}
