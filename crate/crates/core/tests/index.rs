mod oracles;

use nmid_core::encoder::{forward, EncoderCheckpoint, EncoderConfig, ParameterSet};
use nmid_core::index::{build_index, sample_random, top_k_similar, EmbeddingStore, Metric};
use nmid_core::io::{generate_synthetic_dataset, preprocess_encoder, PreprocessConfig, RasterImage, Split};
use nmid_core::tensor::Mat;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_rows(seed: u64, m: usize, d: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..m).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

fn store_of(rows: &[Vec<f64>], metric: Metric) -> EmbeddingStore {
    let ids = (0..rows.len()).map(|i| format!("id{i:06}")).collect();
    EmbeddingStore::new(ids, Mat::from_rows(rows), metric).unwrap()
}

fn ids(n: &[nmid_core::index::Neighbor]) -> Vec<String> {
    n.iter().map(|x| x.id.clone()).collect()
}

#[test]
fn top_k_equals_full_scan_up_to_ten_thousand_rows() {
    for (m, seed) in [(100usize, 1u64), (1_000, 2), (10_000, 3)] {
        let rows = random_rows(seed, m, 16);
        let store = store_of(&rows, Metric::Cosine);
        let q = random_rows(seed + 100, 1, 16).remove(0);
        for k in [1usize, 7, 50] {
            let got = top_k_similar(&store, &q, k, Metric::Cosine).unwrap();
            let want = oracles::full_scan_cosine(&rows, &q);
            assert_eq!(got.len(), k);
            for (g, (i, s)) in got.iter().zip(&want) {
                assert_eq!(g.id, format!("id{i:06}"));
                assert!((g.score.unwrap() - s).abs() <= 1e-12);
            }
            let got = top_k_similar(&store, &q, k, Metric::Euclidean).unwrap();
            let want = oracles::full_scan_euclidean(&rows, &q);
            for (g, (i, _)) in got.iter().zip(&want) {
                assert_eq!(g.id, format!("id{i:06}"));
            }
        }
    }
}

#[test]
fn cached_norms_match_recomputation() {
    let rows = random_rows(4, 50, 9);
    let store = store_of(&rows, Metric::Cosine);
    for (r, n) in rows.iter().zip(store.norms()) {
        assert!((r.iter().map(|x| x * x).sum::<f64>().sqrt() - n).abs() <= 1e-10);
    }
}

#[test]
fn random_sampler_is_uniform_within_three_sigma() {
    let store = store_of(&random_rows(5, 10, 3), Metric::Cosine);
    let draws = 10_000;
    let mut counts = std::collections::HashMap::new();
    for seed in 0..draws {
        let pick = sample_random(&store, 1, seed).unwrap();
        *counts.entry(pick[0].id.clone()).or_insert(0usize) += 1;
    }
    let p = 0.1;
    let mean = draws as f64 * p;
    let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
    assert_eq!(counts.len(), 10);
    for (id, c) in counts {
        assert!((c as f64 - mean).abs() <= 3.0 * sigma, "{id}: {c}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn truncating_full_ranking_equals_direct_top_k(seed in any::<u64>(), m in 1usize..80, k in 0usize..80, euclid in any::<bool>()) {
        let metric = if euclid { Metric::Euclidean } else { Metric::Cosine };
        let rows = random_rows(seed, m, 5);
        let store = store_of(&rows, metric);
        let q = random_rows(seed ^ 1, 1, 5).remove(0);
        let all = top_k_similar(&store, &q, m, metric).unwrap();
        let direct = top_k_similar(&store, &q, k, metric).unwrap();
        prop_assert_eq!(&all[..k.min(m)], &direct[..]);
        for w in all.windows(2) {
            let (a, b) = (w[0].score.unwrap(), w[1].score.unwrap());
            let ordered = if euclid { a <= b } else { a >= b };
            prop_assert!(ordered);
        }
    }

    #[test]
    fn unit_norm_rankings_coincide(seed in any::<u64>(), m in 1usize..60) {
        let unit = |v: Vec<f64>| { let n = v.iter().map(|x| x * x).sum::<f64>().sqrt(); v.into_iter().map(|x| x / n).collect::<Vec<f64>>() };
        let rows: Vec<Vec<f64>> = random_rows(seed, m, 6).into_iter().map(unit).collect();
        let q = unit(random_rows(seed ^ 7, 1, 6).remove(0));
        let store = store_of(&rows, Metric::Cosine);
        let a = top_k_similar(&store, &q, m, Metric::Cosine).unwrap();
        let b = top_k_similar(&store, &q, m, Metric::Euclidean).unwrap();
        // exact score ties can split differently after rounding; compare only well-separated prefixes
        let sa: Vec<f64> = a.iter().map(|n| n.score.unwrap()).collect();
        let separated = sa.windows(2).all(|w| (w[0] - w[1]).abs() > 1e-9);
        if separated {
            prop_assert_eq!(ids(&a), ids(&b));
        }
    }

    #[test]
    fn sampler_draws_distinct_ids(seed in any::<u64>(), m in 1usize..40, k in 0usize..40) {
        let store = store_of(&random_rows(1, m, 2), Metric::Cosine);
        if k <= m {
            let s = sample_random(&store, k, seed).unwrap();
            let mut got = ids(&s);
            got.sort();
            got.dedup();
            prop_assert_eq!(got.len(), k);
        } else {
            prop_assert!(sample_random(&store, k, seed).is_err());
        }
    }
}

#[test]
fn build_index_embeds_every_train_image() {
    let dir = tempfile::tempdir().unwrap();
    let mut manifest = generate_synthetic_dataset(dir.path(), 10, 4, 32, 2).unwrap();
    for (i, r) in manifest.records.iter_mut().enumerate() {
        r.split = if i % 4 == 0 { Split::Test } else { Split::Train };
    }
    let cfg = EncoderConfig {
        image_height: 32,
        image_width: 32,
        channels: 1,
        embed_dim: 16,
        heads: 2,
        head_dim: 8,
        ..EncoderConfig::default()
    };
    let ckpt = EncoderCheckpoint { config: cfg.clone(), params: ParameterSet::init(&cfg) };
    let pre = PreprocessConfig::encoder(32, 32, 1);
    let (store, warnings) = build_index(&manifest, &ckpt, &pre, Metric::Cosine).unwrap();
    assert!(warnings.is_empty());
    assert_eq!(store.len(), 30);
    assert_eq!(store.dim(), 16);
    let (again, _) = build_index(&manifest, &ckpt, &pre, Metric::Cosine).unwrap();
    assert_eq!(again.to_bytes().unwrap(), store.to_bytes().unwrap());
    let first = manifest.records.iter().find(|r| r.split == Split::Train).unwrap();
    let img = preprocess_encoder(&RasterImage::open(std::path::Path::new(&first.path)).unwrap(), &pre).unwrap();
    assert_eq!(store.get(&first.id).unwrap(), forward(&img, &ckpt.params, &cfg).unwrap().as_slice());

    let path = dir.path().join("store.bin");
    store.save(&path).unwrap();
    assert_eq!(EmbeddingStore::load(&path).unwrap(), store.quantized());
}
