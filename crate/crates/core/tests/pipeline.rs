use pictor::dataset::{Manifest, Split};
use pictor::net::PaintingNet;
use pictor::nn::checkpoint::Checkpoint;
use pictor::roi::{AffineParams, CropStrategy};
use pictor::synth::{SynthConfig, SynthCorpus};
use pictor::train::{self, EpochLog, RunConfig, TrainObserver};

fn corpus(count: usize) -> (SynthCorpus, Manifest) {
    let c = SynthCorpus::new(SynthConfig { count, seed: 21, min_side: 96, ..SynthConfig::default() });
    let m = Manifest::build(c.metadata_csv().as_bytes(), "", 2, 0).unwrap();
    (c, m)
}

fn quick(epochs: usize) -> RunConfig {
    RunConfig {
        epochs,
        batch_size: 8,
        eval_every: 0,
        lighting_sample_pixels: 20_000,
        ..RunConfig::default()
    }
}

#[test]
fn one_epoch_is_bitwise_reproducible_and_loader_independent() {
    let (c, m) = corpus(36);
    let dirs: Vec<_> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
    for (i, d) in dirs.iter().enumerate() {
        let cfg = RunConfig { workers: if i == 2 { 2 } else { 0 }, ..quick(1) };
        train::train(&cfg, &m, &c, Some(d.path()), &mut ()).unwrap();
    }
    let bytes: Vec<Vec<u8>> = dirs.iter().map(|d| std::fs::read(d.path().join("last.ckpt")).unwrap()).collect();
    assert_eq!(bytes[0], bytes[1], "same seed, same checkpoint");
    // The recorded run configuration names the worker count; the weights must not depend on it.
    let weights = |b: &[u8]| Checkpoint::from_reader(b).unwrap().tensors;
    assert_eq!(weights(&bytes[0]), weights(&bytes[2]), "background loading changes nothing");

    let other = tempfile::tempdir().unwrap();
    train::train(&RunConfig { seed: 1, ..quick(1) }, &m, &c, Some(other.path()), &mut ()).unwrap();
    assert_ne!(weights(&std::fs::read(other.path().join("last.ckpt")).unwrap()), weights(&bytes[0]));
}

#[test]
fn artifacts_reload_to_the_same_predictions() {
    let (c, m) = corpus(36);
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig { eval_every: 1, ..quick(1) };
    let out = train::train(&cfg, &m, &c, Some(dir.path()), &mut ()).unwrap();
    for f in ["run.cfg", "train_log.jsonl", "best.ckpt", "last.ckpt"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let saved = RunConfig::load(&dir.path().join("run.cfg")).unwrap();
    assert_eq!(saved.epochs, 1);
    assert_ne!(saved.augment.lighting_eigvals, [0.0; 3], "estimated lighting is recorded");

    let ck = Checkpoint::load(&dir.path().join("last.ckpt")).unwrap();
    let reloaded = PaintingNet::from_checkpoint(&ck).unwrap();
    let a = train::evaluate(&out.net, &m, &c, Split::Test, None).unwrap();
    let b = train::evaluate(&reloaded, &m, &c, Split::Test, None).unwrap();
    assert_eq!(a, b);
    assert_eq!(out.last_report.unwrap(), a);
    let log = std::fs::read_to_string(dir.path().join("train_log.jsonl")).unwrap();
    let entry: EpochLog = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(entry.epoch, 0);
}

#[test]
fn training_loss_falls_over_the_first_epochs() {
    let (c, m) = corpus(90);
    let cfg = RunConfig { learning_rate: 0.01, ..quick(5) };
    let out = train::train(&cfg, &m, &c, None, &mut ()).unwrap();
    let losses: Vec<f64> = out.history.iter().map(|h| h.mean_loss).collect();
    assert!(losses[4] < losses[0], "{losses:?}");
}

#[test]
fn reaching_the_target_accuracy_stops_training() {
    let (c, m) = corpus(36);
    let cfg = RunConfig { eval_every: 1, stop_accuracy: Some(1e-9), ..quick(4) };
    let out = train::train(&cfg, &m, &c, None, &mut ()).unwrap();
    assert_eq!(out.history.len(), 1);
}

#[derive(Default)]
struct Transforms {
    seen: Vec<AffineParams>,
    steps: usize,
}

impl TrainObserver for Transforms {
    fn on_step(&mut self, _epoch: usize, _loss: f64, transforms: &[AffineParams]) {
        self.steps += 1;
        self.seen.extend_from_slice(transforms);
    }
}

#[test]
fn stn_transforms_are_scale_and_translation_only() {
    let (c, m) = corpus(24);
    let mut cfg = quick(1);
    cfg.net.crop_strategy = CropStrategy::Stn;
    let mut obs = Transforms::default();
    train::train(&cfg, &m, &c, None, &mut obs).unwrap();
    assert!(obs.steps > 0);
    assert_eq!(obs.seen.len(), 2 * m.split(Split::Train).len());
    for t in &obs.seen {
        let a = t.matrix();
        assert_eq!((a[0][1], a[1][0]), (0.0, 0.0));
        assert_eq!(a[0][0], a[1][1]);
        assert!(t.s >= pictor::roi::MIN_STN_SCALE - 1e-6 && t.s <= 1.0);
    }
}
