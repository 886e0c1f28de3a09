mod common;

use common::{blobs, lloyd_oracle, max_abs_err, normalize_oracle, random_map, random_vocab, residual_oracle};
use patchplace::features::DenseFeatureMap;
use patchplace::vlad::*;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;


#[test]
fn kmeans_agrees_with_sequential_oracle() {
    let pts = blobs(1, 100, &[[0.0, 0.0], [5.0, 5.0], [0.0, 6.0]], 0.5);
    for (k, seed) in [(3, 0), (3, 11), (5, 2), (8, 3)] {
        let p = KMeansParams { k, seed, max_iters: 50, tol: 1e-9 };
        let got = kmeans(&pts, 2, &p).unwrap();
        let (centers, errors) = lloyd_oracle(&pts, 2, &p);
        assert_eq!(got.errors.len(), errors.len());
        for (g, w) in got.errors.iter().zip(&errors) {
            assert!((g - w).abs() <= 1e-9 * (1.0 + w), "{g} vs {w}");
        }
        let flat: Vec<f64> = centers.concat();
        assert!(max_abs_err(&got.centers, &flat) < 1e-9);
    }
}

#[test]
fn error_never_increases_between_iterations() {
    for seed in 0..8 {
        let mut rng = common::rng(100 + seed);
        let pts: Vec<f64> = (0..400 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let out = kmeans(&pts, 3, &KMeansParams { k: 12, seed, max_iters: 60, tol: 0.0 }).unwrap();
        for w in out.errors.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12), "{} -> {}", w[0], w[1]);
        }
    }
}

#[test]
fn separated_blobs_are_found_from_other_seeds() {
    let pts = blobs(4, 100, &[[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]], 0.3);
    let base = kmeans(&pts, 2, &KMeansParams { k: 3, ..Default::default() }).unwrap();
    assert!(base.converged);
    for seed in 1..6 {
        let other = kmeans(&pts, 2, &KMeansParams { k: 3, seed, ..Default::default() }).unwrap();
        assert!(other.final_error() <= base.final_error() * 1.05);
    }
}

#[test]
fn kmeans_ignores_thread_count() {
    let pts = blobs(6, 300, &[[0.0, 0.0], [3.0, 1.0], [1.0, 4.0], [5.0, 5.0]], 1.0);
    let p = KMeansParams { k: 6, seed: 3, ..Default::default() };
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| kmeans(&pts, 2, &p).unwrap())
    };
    let one = run(1);
    for t in [2, 4, 7] {
        let other = run(t);
        assert_eq!(other.centers, one.centers);
        assert_eq!(other.errors, one.errors);
    }
}

#[test]
fn too_few_points_is_reported() {
    let err = kmeans(&[0.0; 6], 2, &KMeansParams { k: 4, ..Default::default() }).unwrap_err();
    assert!(matches!(err, patchplace::Error::InsufficientData { available: 3, required: 4 }));
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn soft_assign_matches_high_precision_oracle() {
    let mut rng = common::rng(8);
    for alpha in [0.1, 1.0, 30.0, 300.0] {
        let vocab = random_vocab(&mut rng, 9, 6, alpha);
        for _ in 0..50 {
            let x: Vec<f32> = (0..6).map(|_| rng.random_range(-1.5f32..1.5)).collect();
            let got = soft_assign(&x, &vocab).unwrap();
            let d: Vec<f64> = (0..9)
                .map(|k| x.iter().zip(vocab.center(k)).map(|(&a, &c)| (a as f64 - c as f64).powi(2)).sum())
                .collect();
            for (k, g) in got.iter().enumerate() {
                let want = 1.0 / d.iter().map(|dj| (-alpha * (dj - d[k])).exp()).sum::<f64>();
                assert!((g - want).abs() <= 1e-12, "alpha {alpha}: {g} vs {want}");
            }
            assert!((got.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }
}

#[test]
fn two_word_vocabulary_by_hand() {
    let vocab = Vocabulary::new(2, 2, 100.0, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
    let map = DenseFeatureMap::new(1, 3, 2, 1, 1, vec![0.1, 0.0, 0.0, 0.2, 0.9, 1.0]).unwrap();
    let v = aggregate_vlad(&map, &vocab).unwrap();
    // block 0 sums (0.1, 0.2), block 1 sums (-0.1, 0); each is unit after
    // intra-normalization, so the global step divides by sqrt(2)
    let want = [1.0 / 10f64.sqrt(), 2.0 / 10f64.sqrt(), -(0.5f64.sqrt()), 0.0];
    assert!(max_abs_err(v.values(), &want) < 1e-6, "{:?}", v.values());
}

#[test]
fn map_without_any_residual_gives_zero_descriptor() {
    let vocab = Vocabulary::new(1, 3, 30.0, vec![0.5, 0.5, 0.5]).unwrap();
    let map = DenseFeatureMap::new(2, 2, 3, 1, 1, vec![0.5; 12]).unwrap();
    let v = aggregate_vlad(&map, &vocab).unwrap();
    assert!(v.is_zero());
    assert_eq!(v.len(), 3);
}

#[test]
fn aggregation_matches_definition() {
    let mut rng = common::rng(12);
    let vocab = random_vocab(&mut rng, 5, 4, 3.0);
    let map = random_map(&mut rng, 6, 7, 4);
    let mut raw = vec![0.0; 20];
    for x in map.features() {
        for (a, r) in raw.iter_mut().zip(residual_oracle(x, &vocab)) {
            *a += r;
        }
    }
    let v = aggregate_vlad(&map, &vocab).unwrap();
    assert!(max_abs_err(v.values(), &normalize_oracle(&raw, 4)) < 1e-12);
}

#[test]
fn features_order_does_not_matter() {
    let mut rng = common::rng(13);
    let vocab = random_vocab(&mut rng, 8, 5, 10.0);
    let map = random_map(&mut rng, 9, 9, 5);
    let mut cells: Vec<&[f32]> = map.features().collect();
    cells.shuffle(&mut rng);
    let data: Vec<f32> = cells.concat();
    let shuffled = DenseFeatureMap::new(9, 9, 5, 1, 1, data).unwrap();
    let a = aggregate_vlad(&map, &vocab).unwrap();
    let b = aggregate_vlad(&shuffled, &vocab).unwrap();
    assert!(max_abs_err(a.values(), b.values()) <= 1e-9);
}

#[test]
fn vocabulary_file_round_trip() {
    let mut rng = common::rng(14);
    let vocab = random_vocab(&mut rng, 7, 3, 12.5);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("v.pvc");
    vocab.save(&path).unwrap();
    assert_eq!(Vocabulary::load(&path).unwrap(), vocab);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn descriptor_norm_invariants(seed: u64, k in 1usize..8, dim in 1usize..6, rows in 1usize..6, cols in 1usize..6, alpha in 0.01f64..200.0) {
        let mut rng = common::rng(seed);
        let vocab = random_vocab(&mut rng, k, dim, alpha);
        let map = random_map(&mut rng, rows, cols, dim);
        let v = aggregate_vlad(&map, &vocab).unwrap();
        prop_assert_eq!(v.len(), k * dim);
        let total = v.values().iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!((total - 1.0).abs() < 1e-9);
        let norms: Vec<f64> = v.values().chunks(dim)
            .map(|b| b.iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        let nonzero = norms.iter().filter(|&&n| n > 0.0).count() as f64;
        for n in norms.iter().filter(|&&n| n > 0.0) {
            prop_assert!((n - 1.0 / nonzero.sqrt()).abs() < 1e-9);
        }
    }

    #[test]
    fn soft_weights_are_a_distribution(seed: u64, k in 1usize..12, alpha in 0.0f64..1000.0) {
        let mut rng = common::rng(seed);
        let vocab = random_vocab(&mut rng, k, 4, alpha);
        let x: Vec<f32> = (0..4).map(|_| rng.random_range(-3.0f32..3.0)).collect();
        let w = soft_assign(&x, &vocab).unwrap();
        prop_assert!(w.iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn global_descriptor_bytes_round_trip(seed: u64, n in 0usize..5) {
        let mut rng = common::rng(seed);
        let vocab = random_vocab(&mut rng, 3, 2, 5.0);
        let ds: Vec<VladDescriptor> = (0..n)
            .map(|_| aggregate_vlad(&random_map(&mut rng, 2, 2, 2), &vocab).unwrap())
            .collect();
        let back = descriptors_from_bytes(&descriptors_to_bytes(3, 2, &ds)).unwrap();
        prop_assert_eq!(back, ds);
    }
}
