//! Acceptance runner: one PASS/FAIL line per criterion, non-zero exit on any failure.
//!
//! `PICTOR_SKIP_TOY_TRAINING=1` replaces the long toy-corpus training runs with a SKIP line.

use std::collections::HashMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use pictor::dataset::{filter_min_per_class, mean_per_class_accuracy, split_70_30, Manifest, PaintingRecord, Split, Task};
use pictor::descriptors::{uniform_lut, DescriptorKind, LBP_BINS};
use pictor::net::{BatchInput, EmbeddingTriple, NetConfig, PaintingNet};
use pictor::nn::{Graph, Mode, Tensor};
use pictor::probe::pooled_probe;
use pictor::retrieval::EmbeddingIndex;
use pictor::roi::{
    self, random_crop_in, random_nonoverlapping_pair_in, AffineParams, CropStrategy, Provenance, COARSE_SIDE, CROP_SIZE,
    FINE_SIDE, MIN_STN_SCALE,
};
use pictor::synth::{SynthConfig, SynthCorpus};
use pictor::train::{self, EpochLog, EvalReport, RunConfig, TrainObserver};
use pictor_testkit::descriptors::uniform_codes;
use pictor_testkit::fixtures::{random_image, random_unit_vectors};
use pictor_testkit::metrics;
use pictor_testkit::suites::{autodiff_suite, descriptor_dims, descriptor_oracle_suite};
use pictor_testkit::topk::brute_force_topk;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    passed: bool,
    detail: String,
}

impl Outcome {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self { passed, detail: detail.into() }
    }
}

struct Runner {
    failures: usize,
}

impl Runner {
    fn run(&mut self, name: &str, budget: Option<Duration>, f: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let out = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f))
            .unwrap_or_else(|_| Outcome::new(false, "panicked"));
        let elapsed = start.elapsed();
        let in_time = budget.is_none_or(|b| elapsed <= b);
        let passed = out.passed && in_time;
        if !passed {
            self.failures += 1;
        }
        let limit = budget.map(|b| format!(" (limit {:.0} s)", b.as_secs_f64())).unwrap_or_default();
        println!(
            "{} {name}: {} [{:.1} s{limit}]",
            if passed { "PASS" } else { "FAIL" },
            out.detail,
            elapsed.as_secs_f64()
        );
    }
}

fn descriptor_oracles() -> Outcome {
    let cases = descriptor_oracle_suite(60, 11);
    let worst = cases.iter().map(|c| c.max_abs_error).fold(0.0, f64::max);
    let dims = descriptor_dims(11);
    let bad_dims: Vec<String> =
        dims.iter().filter(|(k, want, got)| want != got || k.dim() != *want).map(|(k, w, g)| format!("{k} {g}!={w}")).collect();
    Outcome::new(
        worst <= 1e-9 && bad_dims.is_empty() && cases.iter().all(|c| c.images >= 50),
        format!(
            "{} descriptors on {} images, worst per-bin error {worst:.1e}; {} contract dims checked{}",
            cases.len(),
            cases[0].images,
            dims.len(),
            if bad_dims.is_empty() { String::new() } else { format!(", mismatched {bad_dims:?}") }
        ),
    )
}

fn lbp_census() -> Outcome {
    let uniform = uniform_codes();
    let lut = uniform_lut();
    let mapped = uniform.iter().enumerate().all(|(bin, &c)| lut[c as usize] as usize == bin);
    let catch_all = lut.iter().filter(|&&b| b as usize == uniform.len()).count();
    Outcome::new(
        uniform.len() == 242 && LBP_BINS == 243 && mapped && catch_all + uniform.len() == 1 << 16,
        format!("{} uniform codes + 1 catch-all = {LBP_BINS} bins", uniform.len()),
    )
}

fn autodiff() -> Outcome {
    let cases = autodiff_suite(17);
    let failed: Vec<String> = cases.iter().filter(|c| !c.passed()).map(|c| c.summary()).collect();
    Outcome::new(
        failed.is_empty(),
        if failed.is_empty() {
            let worst = cases.iter().filter_map(|c| c.result.as_ref().ok()).map(|r| r.max_rel_error).fold(0.0, f64::max);
            format!("{} layer checks, worst relative error {worst:.1e}", cases.len())
        } else {
            failed.join("; ")
        },
    )
}

fn trace_of(cfg: NetConfig) -> Result<HashMap<String, Vec<usize>>, String> {
    let net = PaintingNet::build(cfg.clone(), 0).map_err(|e| e.to_string())?;
    let crop = Tensor::zeros(vec![1, CROP_SIZE, CROP_SIZE, 3]);
    let input = BatchInput::Crops { crop1: crop.clone(), crop2: crop.clone(), crop3: crop };
    let injected = (cfg.inject_dim > 0).then(|| Tensor::zeros(vec![1, cfg.inject_dim]));
    let mut g = Graph::new();
    let out = net.forward(&mut g, &input, injected.as_ref(), Mode::Eval).map_err(|e| e.to_string())?;
    let mut trace: HashMap<String, Vec<usize>> = out.trace.into_iter().collect();
    for (name, id) in ["artist", "style", "genre"].iter().zip(out.logits) {
        trace.insert(format!("head.{name}"), g.value(id).shape().to_vec());
    }
    Ok(trace)
}

fn shape_contract() -> Outcome {
    let cfg = NetConfig { width_factor: 1.0, num_artist: 1508, num_style: 125, num_genre: 41, ..NetConfig::default() };
    let mut expected: Vec<(String, Vec<usize>)> = Vec::new();
    for b in 1..=3 {
        expected.push((format!("branch{b}.input_layers"), vec![1, 112, 112, 64]));
        expected.push((format!("branch{b}.blocks"), vec![1, 56, 56, 256]));
    }
    for (name, shape) in [
        ("concat", vec![1, 56, 56, 768]),
        ("join", vec![1, 56, 56, 256]),
        ("stage1", vec![1, 28, 28, 512]),
        ("stage2", vec![1, 14, 14, 1024]),
        ("stage3", vec![1, 7, 7, 2048]),
        ("avgpool", vec![1, 2048]),
        ("head_input", vec![1, 2048]),
        ("head.artist", vec![1, 1508]),
        ("head.style", vec![1, 125]),
        ("head.genre", vec![1, 41]),
    ] {
        expected.push((name.into(), shape));
    }
    let plain = match trace_of(cfg.clone()) {
        Ok(t) => t,
        Err(e) => return Outcome::new(false, e),
    };
    let mut mismatches: Vec<String> = expected
        .iter()
        .filter(|(name, shape)| plain.get(name) != Some(shape))
        .map(|(name, shape)| format!("{name} {:?} != {shape:?}", plain.get(name)))
        .collect();
    let hog = DescriptorKind::Hog.dim();
    match trace_of(NetConfig { inject_dim: hog, ..cfg }) {
        Ok(t) if t.get("head_input") == Some(&vec![1, 2048 + hog]) => {}
        Ok(t) => mismatches.push(format!("injected head_input {:?}", t.get("head_input"))),
        Err(e) => mismatches.push(e),
    }
    Outcome::new(
        mismatches.is_empty(),
        if mismatches.is_empty() {
            format!("{} stage shapes match at width factor 1; HOG injection gives head input {}", expected.len(), 2048 + hog)
        } else {
            mismatches.join("; ")
        },
    )
}

#[derive(Default)]
struct TransformAudit {
    batches: usize,
    transforms: usize,
    bad: usize,
}

impl TrainObserver for TransformAudit {
    fn on_step(&mut self, _epoch: usize, _loss: f64, transforms: &[AffineParams]) {
        self.batches += 1;
        for t in transforms {
            self.transforms += 1;
            let a = t.matrix();
            let shear_free = a[0][1] == 0.0 && a[1][0] == 0.0 && a[0][0] == a[1][1];
            if !shear_free || t.s < MIN_STN_SCALE - 1e-6 || t.s > 1.0 {
                self.bad += 1;
            }
        }
    }
}

fn crop_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let (mut overlaps, mut out_of_bounds) = (0, 0);
    let proposals = 10_000;
    for _ in 0..proposals {
        let long = rng.random_range(FINE_SIDE..=3 * FINE_SIDE);
        let (w, h) = if rng.random_bool(0.5) { (long, FINE_SIDE) } else { (FINE_SIDE, long) };
        let (a, b) = random_nonoverlapping_pair_in(w, h, &mut rng).expect("valid fine source");
        let (cw, ch) = (w * COARSE_SIDE / FINE_SIDE, h * COARSE_SIDE / FINE_SIDE);
        let c = random_crop_in(cw, ch, COARSE_SIDE, &mut rng).expect("valid coarse source");
        overlaps += usize::from(a.intersection_area(&b) != 0);
        out_of_bounds += [a.fits(w, h), b.fits(w, h), c.fits(cw, ch)].iter().filter(|&&ok| !ok).count();
    }
    let full = 200;
    for _ in 0..full {
        let img = random_image(rng.random_range(60..200), rng.random_range(60..200), 256, &mut rng);
        let set = roi::propose(&img, CropStrategy::Random, &mut rng, None).expect("proposal");
        if let [Provenance::Window(a), Provenance::Window(b), Provenance::Window(_)] = set.provenance {
            overlaps += usize::from(a.intersection_area(&b) != 0);
        }
        out_of_bounds += [&set.crop1, &set.crop2, &set.crop3]
            .iter()
            .filter(|c| (c.width(), c.height()) != (CROP_SIZE, CROP_SIZE))
            .count();
    }

    let corpus = SynthCorpus::new(SynthConfig { count: 40, seed: 5, min_side: 96, ..SynthConfig::default() });
    let manifest = match Manifest::build(corpus.metadata_csv().as_bytes(), "", 2, 0) {
        Ok(m) => m,
        Err(e) => return Outcome::new(false, e.to_string()),
    };
    let mut cfg = RunConfig { epochs: 3, batch_size: 8, eval_every: 0, lighting_sample_pixels: 20_000, ..RunConfig::default() };
    cfg.net.crop_strategy = CropStrategy::Stn;
    let mut audit = TransformAudit::default();
    if let Err(e) = train::train(&cfg, &manifest, &corpus, None, &mut audit) {
        return Outcome::new(false, e.to_string());
    }
    let expected = 3 * 2 * manifest.split(Split::Train).len();
    Outcome::new(
        overlaps == 0 && out_of_bounds == 0 && audit.bad == 0 && audit.transforms == expected,
        format!(
            "{} proposals: {overlaps} overlaps, {out_of_bounds} out of bounds; 3-epoch STN run: {} batches, {}/{} transforms with rotation or shear",
            proposals + full,
            audit.batches,
            audit.bad,
            audit.transforms
        ),
    )
}

struct Progress;

impl TrainObserver for Progress {
    fn on_epoch(&mut self, log: &EpochLog) {
        let eval = log.eval.map(|e| format!(" eval {:.3} {:.3} {:.3}", e[0], e[1], e[2])).unwrap_or_default();
        eprintln!("  epoch {:>2} loss {:.4} ({:.0} s){eval}", log.epoch, log.mean_loss, log.seconds);
    }
}

fn toy_training() -> Outcome {
    let corpus = SynthCorpus::new(SynthConfig::default());
    let manifest = match Manifest::build(corpus.metadata_csv().as_bytes(), "", 10, 0) {
        Ok(m) => m,
        Err(e) => return Outcome::new(false, e.to_string()),
    };
    let smallest = Task::ALL
        .iter()
        .flat_map(|&t| pictor::dataset::class_distribution(&manifest.records, t).into_iter().map(|(_, n)| n))
        .min()
        .unwrap_or(0);
    let multitask = RunConfig { epochs: 30, eval_every: 1, stop_accuracy: Some(0.9), ..RunConfig::default() };
    let start = Instant::now();
    let joint = match train::train(&multitask, &manifest, &corpus, None, &mut Progress) {
        Ok(o) => o,
        Err(e) => return Outcome::new(false, e.to_string()),
    };
    let minutes = start.elapsed().as_secs_f64() / 60.0;
    let epochs = joint.history.len();
    let early: Vec<f64> = joint.history.iter().take(5).map(|h| h.mean_loss).collect();
    let falling = early.windows(2).all(|w| w[1] < w[0]);
    let report = joint.last_report.clone().unwrap_or_else(|| EvalReport::from_accuracies([0.0; 3]));

    let single = RunConfig { epochs, eval_every: 0, stop_accuracy: None, loss_weights: [1.0, 0.0, 0.0], ..multitask };
    let baseline = train::train(&single, &manifest, &corpus, None, &mut Progress)
        .map_err(|e| e.to_string())
        .and_then(|o| pooled_probe(&o.net, &manifest, &corpus, Task::Style, None, 0).map_err(|e| e.to_string()));
    let baseline = match baseline {
        Ok(p) => p.accuracy,
        Err(e) => return Outcome::new(false, e),
    };
    let [a, s, g] = report.accuracy;
    Outcome::new(
        report.accuracy.iter().all(|&v| v >= 0.9)
            && epochs <= 30
            && minutes < 60.0
            && smallest >= 10
            && manifest.records.len() == 1200
            && s >= baseline,
        format!(
            "{} images, smallest class {smallest}; multitask reached artist {a:.3} style {s:.3} genre {g:.3} after {epochs} epochs in {minutes:.1} min (loss over the first epochs {}); artist-only style probe {baseline:.3}",
            manifest.records.len(),
            if falling { "strictly decreasing" } else { "not monotone" }
        ),
    )
}

fn record(i: usize, artist: &str, style: &str, genre: &str) -> PaintingRecord {
    PaintingRecord {
        id: format!("r{i:05}"),
        image_path: String::new(),
        artist: artist.into(),
        style: style.into(),
        genre: genre.into(),
        split: Split::Unassigned,
    }
}

/// Removes one violating record at a time until none is left.
fn naive_fixed_point(mut records: Vec<PaintingRecord>, floor: usize) -> Vec<PaintingRecord> {
    loop {
        let mut counts: HashMap<(usize, String), usize> = HashMap::new();
        for r in &records {
            for t in Task::ALL {
                *counts.entry((t.index(), r.label(t).to_string())).or_default() += 1;
            }
        }
        let victim = records.iter().position(|r| Task::ALL.iter().any(|&t| counts[&(t.index(), r.label(t).to_string())] < floor));
        match victim {
            Some(i) => {
                records.remove(i);
            }
            None => return records,
        }
    }
}

/// A six-link chain where dropping the undersized first artist pushes each following
/// style, then artist, below the floor; only the last artist survives. Around it sits a
/// well-populated core and a fringe of classes near the floor.
fn adversarial_metadata(rng: &mut impl Rng) -> Vec<(String, String, String)> {
    let mut out = Vec::new();
    let links = 6;
    for k in 0..links {
        let n = if k == 0 { 9 } else { 10 };
        for j in 0..n {
            let style = if j == 0 && k + 1 < links { k + 1 } else { k };
            out.push((format!("chain_a{k}"), format!("chain_s{style}"), format!("g{}", rng.random_range(0..3))));
        }
    }
    for _ in 0..rng.random_range(200..300) {
        out.push((
            format!("a{}", rng.random_range(0..4)),
            format!("s{}", rng.random_range(0..3)),
            format!("g{}", rng.random_range(0..3)),
        ));
    }
    for f in 0..rng.random_range(3..8) {
        let size = rng.random_range(8..13);
        for _ in 0..size {
            let (artist, style) = if f % 2 == 0 {
                (format!("fringe_a{f}"), format!("s{}", rng.random_range(0..3)))
            } else {
                (format!("a{}", rng.random_range(0..4)), format!("fringe_s{f}"))
            };
            out.push((artist, style, format!("g{}", rng.random_range(0..3))));
        }
    }
    rand::seq::SliceRandom::shuffle(out.as_mut_slice(), rng);
    out
}

fn dataset_rules() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut problems = Vec::new();
    let mut cascades = 0;
    for trial in 0..20 {
        let records: Vec<PaintingRecord> =
            adversarial_metadata(&mut rng).iter().enumerate().map(|(i, (a, s, g))| record(i, a, s, g)).collect();
        let oracle: Vec<String> = naive_fixed_point(records.clone(), 10).into_iter().map(|r| r.id).collect();
        match filter_min_per_class(records.clone(), 10) {
            Ok((kept, _)) => {
                let ids: Vec<String> = kept.iter().map(|r| r.id.clone()).collect();
                if ids != oracle {
                    problems.push(format!("trial {trial}: {} kept, oracle {}", ids.len(), oracle.len()));
                }
                let again = filter_min_per_class(kept.clone(), 10).map(|(k, _)| k).ok();
                if again.as_ref() != Some(&kept) {
                    problems.push(format!("trial {trial}: second pass changed the result"));
                }
                let chain: std::collections::BTreeSet<&str> =
                    kept.iter().filter(|r| r.artist.starts_with("chain")).map(|r| r.artist.as_str()).collect();
                if chain.into_iter().eq(["chain_a5"]) {
                    cascades += 1;
                }
            }
            Err(e) => problems.push(format!("trial {trial}: {e}")),
        }
    }

    let mut split_checks = 0;
    for n in (1..=400).chain([997, 1200, 4321]) {
        let records: Vec<PaintingRecord> = (0..n).map(|i| record(i, "a", "s", "g")).collect();
        let split = split_70_30(records, n as u64);
        let train = split.iter().filter(|r| r.split == Split::Train).count();
        let test = split.iter().filter(|r| r.split == Split::Test).count();
        if train + test != n || (train as f64 - 0.7 * n as f64).abs() > 1.0 {
            problems.push(format!("split of {n}: {train}/{test}"));
        }
        split_checks += 1;
    }

    let mut worst = 0.0f64;
    for _ in 0..100 {
        let classes = rng.random_range(1..=12);
        let n = rng.random_range(1..=300);
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let pred: Vec<usize> = truth
            .iter()
            .map(|&t| if rng.random_bool(0.6) { t } else { rng.random_range(0..classes) })
            .collect();
        let ours = mean_per_class_accuracy(&pred, &truth, classes).unwrap_or(f64::NAN);
        let oracle = metrics::mean_per_class_accuracy(&truth, &pred, classes);
        worst = worst.max((ours - oracle).abs());
    }
    Outcome::new(
        problems.is_empty() && worst <= 1e-12 && cascades == 20,
        format!(
            "20 cascading filters match the one-at-a-time fixed point{}; {split_checks} split sizes within 1 of 70%; 100 accuracy cases, worst difference {worst:.1e}{}",
            if cascades == 20 { "" } else { " (chain did not cascade)" },
            if problems.is_empty() { String::new() } else { format!("; {}", problems.join("; ")) }
        ),
    )
}

fn table_arithmetic() -> Outcome {
    let report = EvalReport::from_accuracies([0.565, 0.572, 0.636]);
    let row = report.table_row();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mean_ok = (0..100).all(|_| {
        let acc = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
        let r = EvalReport::from_accuracies(acc);
        (r.average - (acc[0] + acc[1] + acc[2]) / 3.0).abs() < 1e-12 && r.row()[3] == r.average
    });
    Outcome::new(row.ends_with("| 59.1") && mean_ok, format!("published row prints `{row}`; average is the task mean on 100 random rows"))
}

fn retrieval() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 1000;
    let dims = [48, 24, 12];
    let rows: [Vec<Vec<f32>>; 3] = dims.map(|d| random_unit_vectors(n, d, &mut rng));
    let ids: Vec<String> = (0..n).map(|i| format!("p{:04}", (i * 7919) % 10_007)).collect();
    let triples: Vec<EmbeddingTriple> = (0..n)
        .map(|i| EmbeddingTriple { artist: rows[0][i].clone(), style: rows[1][i].clone(), genre: rows[2][i].clone() })
        .collect();
    let index = match EmbeddingIndex::new(ids.clone(), &triples, dims, "00".repeat(32)) {
        Ok(i) => i,
        Err(e) => return Outcome::new(false, e.to_string()),
    };
    let mut mismatches = 0;
    let mut queries = 0;
    let mut self_fail = 0;
    for t in Task::ALL {
        let table = &rows[t.index()];
        for q in 0..20 {
            let query: Vec<f32> = random_unit_vectors(1, dims[t.index()], &mut rng).remove(0);
            for k in [1, 4, 10, 2000] {
                queries += 1;
                let ours = index.query_topk(t, &query, k).expect("query");
                let oracle = brute_force_topk(&ids, table, &query, k);
                let same = ours.len() == oracle.len()
                    && ours.iter().zip(&oracle).enumerate().all(|(i, (h, o))| {
                        h.painting_id == o.0 && h.rank == i + 1 && (h.score - o.1).abs() <= 1e-6
                    });
                mismatches += usize::from(!same);
            }
            let i = (q * 53) % n;
            let hit = &index.query_topk(t, index.row(t, i), 1).expect("query")[0];
            if hit.painting_id != ids[i] || hit.rank != 1 || (hit.score - 1.0).abs() > 1e-6 {
                self_fail += 1;
            }
        }
    }
    let mut bytes = Vec::new();
    let round_trip = index.write_to(&mut bytes).is_ok()
        && EmbeddingIndex::read_from(bytes.as_slice()).is_ok_and(|back| {
            let mut again = Vec::new();
            back == index && back.write_to(&mut again).is_ok() && again == bytes
        });
    Outcome::new(
        mismatches == 0 && self_fail == 0 && round_trip,
        format!(
            "{queries} queries on {n} embeddings vs brute force: {mismatches} mismatches; {self_fail} self-query failures; bitwise round trip {}",
            if round_trip { "ok" } else { "failed" }
        ),
    )
}

fn service_contract() -> Outcome {
    let service = match pictor_server::conformance::toy_service(40, 3) {
        Ok(s) => s,
        Err(e) => return Outcome::new(false, e.to_string()),
    };
    let state = Arc::new(pictor_server::AppState::new(service));
    let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build().expect("runtime");
    let checks = rt.block_on(pictor_server::conformance::run(state));
    let failed: Vec<String> = checks.iter().filter(|c| !c.passed).map(|c| format!("{} ({})", c.name, c.detail)).collect();
    Outcome::new(
        failed.is_empty() && !checks.is_empty(),
        if failed.is_empty() { format!("{} scripted checks passed", checks.len()) } else { failed.join("; ") },
    )
}

fn main() {
    let mut r = Runner { failures: 0 };
    let min = |m: u64| Some(Duration::from_secs(60 * m));
    r.run("descriptor oracle suite", min(1), descriptor_oracles);
    r.run("LBP uniform-pattern census", Some(Duration::from_secs(5)), lbp_census);
    r.run("autodiff finite-difference suite", min(2), autodiff);
    r.run("architecture shape contract", None, shape_contract);
    r.run("crop invariants", None, crop_invariants);
    if std::env::var_os("PICTOR_SKIP_TOY_TRAINING").is_some() {
        println!("SKIP toy-corpus training: PICTOR_SKIP_TOY_TRAINING is set");
    } else {
        r.run("toy-corpus training", None, toy_training);
    }
    r.run("dataset rules", None, dataset_rules);
    r.run("table arithmetic", None, table_arithmetic);
    r.run("retrieval", None, retrieval);
    r.run("service contract", None, service_contract);
    if r.failures > 0 {
        println!("{} criteria failed", r.failures);
        std::process::exit(1);
    }
    println!("all criteria passed");
}
