mod oracles;

use std::collections::BTreeMap;

use nmid_core::io::{generate_synthetic_dataset, Split};
use nmid_core::mining::{
    fit_pca, hardness_scores, kmeans, kmeans_from, make_split, mine, project, reconstruct, silhouette, ComponentCount,
    KMeansConfig, MiningConfig,
};
use nmid_core::tensor::Mat;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn random_matrix(seed: u64, m: usize, d: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..m).map(|_| (0..d).map(|_| rng.random_range(-3.0..3.0)).collect()).collect()
}

fn rows_of(m: &Mat) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

fn blobs(seed: u64, per: usize) -> (Mat, Vec<usize>) {
    let centres = [[0.0, 0.0], [20.0, 0.0], [0.0, 20.0]];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0, 1.0).unwrap();
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (c, centre) in centres.iter().enumerate() {
        for _ in 0..per {
            rows.push(vec![centre[0] + n.sample(&mut rng), centre[1] + n.sample(&mut rng)]);
            labels.push(c);
        }
    }
    (Mat::from_rows(&rows), labels)
}

#[test]
fn eigenvalues_match_dense_jacobi_on_tall_matrix() {
    let x = random_matrix(20, 20, 5);
    let pca = fit_pca(&Mat::from_rows(&x), ComponentCount::Fixed { n: 5 }).unwrap();
    let want = oracles::jacobi_eigenvalues(&oracles::covariance(&x));
    for (a, b) in pca.eigenvalues.iter().zip(&want) {
        assert!((a - b).abs() <= 1e-8, "{a} vs {b}");
    }
}

#[test]
fn gram_side_matches_dense_jacobi_on_wide_matrix() {
    let x = random_matrix(21, 5, 20);
    let pca = fit_pca(&Mat::from_rows(&x), ComponentCount::Fixed { n: 5 }).unwrap();
    let want = oracles::jacobi_eigenvalues(&oracles::covariance(&x));
    for (a, b) in pca.eigenvalues.iter().zip(&want) {
        assert!((a - b).abs() <= 1e-8, "{a} vs {b}");
    }
    // rank is at most M - 1 = 4
    assert!(pca.eigenvalues[4].abs() <= 1e-8);
}

#[test]
fn projected_covariance_is_diagonal_with_eigenvalues() {
    let x = Mat::from_rows(&random_matrix(3, 40, 6));
    let pca = fit_pca(&x, ComponentCount::Fixed { n: 4 }).unwrap();
    let z = project(&pca, &x).unwrap();
    let cov = oracles::covariance(&rows_of(&z));
    for i in 0..4 {
        for j in 0..4 {
            let want = if i == j { pca.eigenvalues[i] } else { 0.0 };
            assert!((cov[i][j] - want).abs() <= 1e-8);
        }
    }
}

#[test]
fn full_rank_model_reconstructs_input() {
    let x = Mat::from_rows(&random_matrix(4, 12, 5));
    let pca = fit_pca(&x, ComponentCount::Fixed { n: 5 }).unwrap();
    let back = reconstruct(&pca, &project(&pca, &x).unwrap());
    for (a, b) in back.data().iter().zip(x.data()) {
        assert!((a - b).abs() <= 1e-8);
    }
}

#[test]
fn variance_target_picks_smallest_sufficient_count() {
    // one dominant direction plus small noise
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let rows: Vec<Vec<f64>> = (0..50)
        .map(|_| {
            let t: f64 = rng.random_range(-10.0..10.0);
            vec![t, 2.0 * t + rng.random_range(-0.01..0.01), rng.random_range(-0.01..0.01)]
        })
        .collect();
    let pca = fit_pca(&Mat::from_rows(&rows), ComponentCount::default()).unwrap();
    assert_eq!(pca.n_components(), 1);
    assert!(pca.explained_variance_ratio() >= 0.95);
}

#[test]
fn blob_clusters_are_pure() {
    let (z, labels) = blobs(5, 30);
    let c = kmeans(&z, &KMeansConfig { k: 3, seed: 1, ..KMeansConfig::default() }).unwrap();
    let mut map = BTreeMap::new();
    for (a, l) in c.assignments.iter().zip(&labels) {
        assert_eq!(*map.entry(*a).or_insert(*l), *l, "cluster {a} mixes labels");
    }
    assert_eq!(map.len(), 3);
}

#[test]
fn converged_centroids_are_a_fixed_point() {
    let (z, _) = blobs(9, 20);
    let c = kmeans(&z, &KMeansConfig { k: 3, seed: 4, tol: 0.0, ..KMeansConfig::default() }).unwrap();
    assert!(c.converged);
    let again = kmeans_from(&z, c.centroids.clone(), 300, 0.0).unwrap();
    assert_eq!(again.centroids, c.centroids);
    assert_eq!(again.assignments, c.assignments);
    assert_eq!(again.iterations, 1);
}

#[test]
fn silhouette_matches_brute_force_on_twelve_points() {
    let x = random_matrix(12, 12, 3);
    let z = Mat::from_rows(&x);
    let c = kmeans(&z, &KMeansConfig { k: 3, seed: 2, ..KMeansConfig::default() }).unwrap();
    let got = silhouette(&z, &c.assignments).unwrap();
    let want = oracles::silhouette_brute(&x, &c.assignments);
    for (a, b) in got.iter().zip(&want) {
        assert!((a - b).abs() <= 1e-10);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn lloyd_inertia_never_increases(seed in any::<u64>(), m in 5usize..120, k in 1usize..8, d in 1usize..6) {
        let k = k.min(m);
        let z = Mat::from_rows(&random_matrix(seed, m, d));
        let c = kmeans(&z, &KMeansConfig { k, seed, ..KMeansConfig::default() }).unwrap();
        for w in c.inertia_history.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-9 * w[0].abs().max(1.0));
        }
        let recomputed: f64 = (0..m).map(|i| nmid_core::tensor::squared_distance(z.row(i), c.centroids.row(c.assignments[i]))).sum();
        prop_assert!((recomputed - c.inertia).abs() <= 1e-8);
        prop_assert!(c.assignments.iter().all(|&a| a < k));
    }

    #[test]
    fn silhouette_agrees_with_oracle(seed in any::<u64>(), m in 4usize..200, k in 2usize..6) {
        let x = random_matrix(seed, m, 3);
        let assignments: Vec<usize> = (0..m).map(|i| (i * 7 + seed as usize) % k).collect();
        let got = silhouette(&Mat::from_rows(&x), &assignments).unwrap();
        let want = oracles::silhouette_brute(&x, &assignments);
        for (a, b) in got.iter().zip(&want) {
            prop_assert!((a - b).abs() <= 1e-10);
            prop_assert!((-1.0..=1.0).contains(a));
        }
    }

    #[test]
    fn pca_rows_are_orthonormal(seed in any::<u64>(), m in 3usize..30, d in 2usize..12) {
        let x = Mat::from_rows(&random_matrix(seed, m, d));
        let n = m.min(d);
        let pca = fit_pca(&x, ComponentCount::Fixed { n }).unwrap();
        let g = pca.components.matmul_t(&pca.components);
        for i in 0..n {
            for j in 0..n {
                let want = if i == j { 1.0 } else { 0.0 };
                prop_assert!((g.get(i, j) - want).abs() <= 1e-8);
            }
        }
        for w in pca.eigenvalues.windows(2) {
            prop_assert!(w[0] >= w[1] && w[1] >= 0.0);
        }
        prop_assert!(pca.eigenvalues.iter().sum::<f64>() <= pca.total_variance + 1e-8);
    }
}

#[test]
fn split_on_synthetic_corpus_takes_hardest_two_per_class() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_synthetic_dataset(dir.path(), 10, 20, 32, 7).unwrap();
    let cfg = MiningConfig { height: 32, width: 32, seed: 3, ..MiningConfig::default() };
    let out = mine(&manifest, &cfg).unwrap();
    let mut test_h = Vec::new();
    let mut train_h = Vec::new();
    for label in &out.manifest.labels {
        let class: Vec<_> = out.manifest.records.iter().filter(|r| &r.label == label).collect();
        let tests: Vec<_> = class.iter().filter(|r| r.split == Split::Test).collect();
        assert_eq!(tests.len(), 2, "class {label}");
        let min_test = tests.iter().map(|r| r.hardness.unwrap()).fold(f64::INFINITY, f64::min);
        for r in &class {
            if r.split == Split::Train {
                assert!(r.hardness.unwrap() <= min_test);
            }
        }
    }
    for r in &out.manifest.records {
        match r.split {
            Split::Test => test_h.push(r.hardness.unwrap()),
            Split::Train => train_h.push(r.hardness.unwrap()),
            Split::Unassigned => panic!("unassigned record"),
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(mean(&test_h) > mean(&train_h));
    // deterministic
    let again = mine(&manifest, &cfg).unwrap();
    assert_eq!(again.manifest, out.manifest);
}

#[test]
fn zero_fraction_keeps_everything_in_train() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_synthetic_dataset(dir.path(), 2, 4, 8, 1).unwrap();
    let h: BTreeMap<String, f64> = manifest.records.iter().enumerate().map(|(i, r)| (r.id.clone(), i as f64)).collect();
    let out = make_split(&manifest, &h, 0.0).unwrap();
    assert!(out.records.iter().all(|r| r.split == Split::Train));
    let scores = hardness_scores(&[1.0, 2.0], &[0.0, 0.0]).unwrap();
    assert_eq!(scores, vec![0.25, 0.75]);
}
