use pictor::dataset::mean_per_class_accuracy;
use pictor::net::EmbeddingTriple;
use pictor::retrieval::EmbeddingIndex;
use pictor_testkit::fixtures::random_unit_vectors;
use pictor_testkit::metrics;
use pictor_testkit::topk::brute_force_topk;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #[test]
    fn accuracy_matches_confusion_matrix(
        k in 1usize..8,
        pairs in proptest::collection::vec((0usize..8, 0usize..8), 1..60),
    ) {
        let truth: Vec<usize> = pairs.iter().map(|p| p.0 % k).collect();
        let pred: Vec<usize> = pairs.iter().map(|p| p.1 % k).collect();
        let ours = mean_per_class_accuracy(&pred, &truth, k).unwrap();
        let oracle = metrics::mean_per_class_accuracy(&truth, &pred, k);
        prop_assert!((ours - oracle).abs() < 1e-12);
    }
}

#[test]
fn topk_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let rows = random_unit_vectors(300, 6, &mut rng);
    let ids: Vec<String> = (0..rows.len()).map(|i| format!("p{i:04}")).collect();
    let triples: Vec<EmbeddingTriple> = rows
        .iter()
        .map(|r| EmbeddingTriple { artist: r.clone(), style: r.clone(), genre: r.clone() })
        .collect();
    let index = EmbeddingIndex::new(ids.clone(), &triples, [6, 6, 6], "x".into()).unwrap();
    let queries = random_unit_vectors(5, 6, &mut rng);
    for q in &queries {
        for k in [1, 7, 300, 1000] {
            let got = index.query_topk(pictor::dataset::Task::Style, q, k).unwrap();
            let want = brute_force_topk(&ids, &rows, q, k);
            assert_eq!(got.len(), want.len());
            for (h, (id, s)) in got.iter().zip(&want) {
                assert_eq!(&h.painting_id, id);
                assert!((h.score - s).abs() < 1e-12);
            }
        }
    }
}
