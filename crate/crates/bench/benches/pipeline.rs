use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use pictor::dataset::Task;
use pictor::descriptors::DescriptorKind;
use pictor::net::{l2_normalized, BatchInput, EmbeddingTriple, NetConfig, PaintingNet};
use pictor::nn::optim::Sgd;
use pictor::nn::{Graph, Mode, Tensor};
use pictor::retrieval::EmbeddingIndex;
use pictor::roi::{self, CropStrategy};
use pictor::synth::{SynthConfig, SynthCorpus};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn training_step(c: &mut Criterion) {
    let n = 4;
    let cfg = NetConfig { num_artist: 6, num_style: 4, num_genre: 3, ..NetConfig::default() };
    let mut net = PaintingNet::build(cfg, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut crop = || {
        Tensor::new(vec![n, 224, 224, 3], (0..n * 224 * 224 * 3).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    };
    let input = BatchInput::Crops { crop1: crop(), crop2: crop(), crop3: crop() };
    let labels = vec![1; n];
    let mut opt = Sgd::new(0.9, 1e-4);
    let mut group = c.benchmark_group("network");
    group.sample_size(10);
    group.bench_function("train_step_batch4_wf1_16", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let out = net.forward(&mut g, &input, None, Mode::Train).unwrap();
            let loss = g.softmax_cross_entropy(out.logits[0], &labels).unwrap();
            g.backward(loss).unwrap();
            net.params.zero_grad();
            net.params.accumulate_grads(&g);
            net.params.commit_running_stats(&mut g, 0.1);
            opt.step(&mut net.params, 0.01);
        })
    });
    group.finish();
}

fn descriptors(c: &mut Criterion) {
    let img = SynthCorpus::new(SynthConfig { count: 1, min_side: 256, ..SynthConfig::default() }).render(0);
    let mut group = c.benchmark_group("descriptors_256");
    group.sample_size(10);
    for kind in [DescriptorKind::Hog, DescriptorKind::LbpLcc, DescriptorKind::Chromaticity, DescriptorKind::GistRgb] {
        group.bench_function(kind.name(), |b| b.iter(|| kind.extract(&img).unwrap()));
    }
    group.finish();
}

fn proposals(c: &mut Criterion) {
    let img = SynthCorpus::new(SynthConfig { count: 1, ..SynthConfig::default() }).render(0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    c.bench_function("propose_random", |b| {
        b.iter(|| roi::propose(&img, CropStrategy::Random, &mut rng, None).unwrap())
    });
}

fn query_topk(c: &mut Criterion) {
    let n = 10_000;
    let dims = [1508, 125, 41];
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut unit = |d: usize| l2_normalized(&(0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect::<Vec<_>>());
    let rows: Vec<EmbeddingTriple> =
        (0..n).map(|_| EmbeddingTriple { artist: unit(dims[0]), style: unit(dims[1]), genre: unit(dims[2]) }).collect();
    let index = EmbeddingIndex::new((0..n).map(|i| format!("p{i:05}")).collect(), &rows, dims, String::new()).unwrap();
    let mut group = c.benchmark_group("query_topk_10k");
    for task in Task::ALL {
        let q = index.row(task, 17).to_vec();
        group.bench_function(task.name(), |b| {
            b.iter_batched(|| q.clone(), |q| index.query_topk(task, &q, 10).unwrap(), BatchSize::SmallInput)
        });
    }
    group.finish();
}

criterion_group!(benches, training_step, descriptors, proposals, query_topk);
criterion_main!(benches);
