mod oracles;

use nmid_core::tensor::Mat;
use nmid_core::train::{halves_pairing, nt_xent};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_rows(rng: &mut ChaCha8Rng, m: usize, d: usize) -> Vec<Vec<f64>> {
    (0..m).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

#[test]
fn matches_double_loop_oracle_on_seeded_cases() {
    let taus = [0.1, 0.5, 1.0];
    let mut worst = 0.0f64;
    for case in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(case);
        let n = rng.random_range(2..=8usize);
        let d = rng.random_range(3..=16usize);
        let tau = taus[(case % 3) as usize];
        let rows = random_rows(&mut rng, 2 * n, d);
        let pairing = halves_pairing(n);
        let fast = nt_xent(&Mat::from_rows(&rows), &pairing, tau).unwrap();
        let slow = oracles::nt_xent_naive(&rows, &pairing, tau);
        worst = worst.max((fast - slow).abs());
    }
    assert!(worst <= 1e-10, "max abs diff {worst}");
}

#[test]
fn three_pairs_in_four_dims_match_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let rows = random_rows(&mut rng, 6, 4);
    let pairing = halves_pairing(3);
    let fast = nt_xent(&Mat::from_rows(&rows), &pairing, 0.5).unwrap();
    assert!((fast - oracles::nt_xent_naive(&rows, &pairing, 0.5)).abs() <= 1e-10);
}

#[test]
fn identical_embeddings_give_ln2() {
    let rows = vec![vec![0.3, -1.2, 0.7]; 4];
    let loss = nt_xent(&Mat::from_rows(&rows), &halves_pairing(2), 0.5).unwrap();
    assert!((loss - std::f64::consts::LN_2).abs() <= 1e-12);
}

#[test]
fn custom_pairing_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let rows = random_rows(&mut rng, 6, 5);
    let pairing = vec![1, 0, 3, 2, 5, 4];
    let fast = nt_xent(&Mat::from_rows(&rows), &pairing, 0.1).unwrap();
    assert!((fast - oracles::nt_xent_naive(&rows, &pairing, 0.1)).abs() <= 1e-10);
}

/// Random orthogonal matrix from Gram-Schmidt on seeded Gaussian columns.
fn random_rotation(rng: &mut ChaCha8Rng, d: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    while basis.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        for b in &basis {
            let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= p * y;
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn invariant_to_positive_rescaling(seed in any::<u64>(), n in 2usize..=8, d in 3usize..=16, scales in prop::collection::vec(0.01f64..100.0, 16)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = random_rows(&mut rng, 2 * n, d);
        let scaled: Vec<Vec<f64>> = rows.iter().enumerate().map(|(i, r)| r.iter().map(|x| x * scales[i]).collect()).collect();
        let p = halves_pairing(n);
        let a = nt_xent(&Mat::from_rows(&rows), &p, 0.5).unwrap();
        let b = nt_xent(&Mat::from_rows(&scaled), &p, 0.5).unwrap();
        prop_assert!((a - b).abs() <= 1e-9);
    }

    #[test]
    fn invariant_to_global_rotation(seed in any::<u64>(), n in 2usize..=8, d in 3usize..=16) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = random_rows(&mut rng, 2 * n, d);
        let q = random_rotation(&mut rng, d);
        let rotated: Vec<Vec<f64>> = rows.iter().map(|r| q.iter().map(|qr| qr.iter().zip(r).map(|(a, b)| a * b).sum()).collect()).collect();
        let p = halves_pairing(n);
        let a = nt_xent(&Mat::from_rows(&rows), &p, 1.0).unwrap();
        let b = nt_xent(&Mat::from_rows(&rotated), &p, 1.0).unwrap();
        prop_assert!((a - b).abs() <= 1e-9);
    }

    #[test]
    fn agrees_with_oracle(seed in any::<u64>(), n in 2usize..=8, d in 3usize..=16, t in 0usize..3) {
        let tau = [0.1, 0.5, 1.0][t];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = random_rows(&mut rng, 2 * n, d);
        let p = halves_pairing(n);
        let fast = nt_xent(&Mat::from_rows(&rows), &p, tau).unwrap();
        prop_assert!((fast - oracles::nt_xent_naive(&rows, &p, tau)).abs() <= 1e-10);
    }
}
