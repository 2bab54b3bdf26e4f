use norppa_core::vocab::{fit_gmm, GmmParams, GmmVocabulary};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn clusters(centers: &[[f64; 2]], n: usize, sd: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, sd).unwrap();
    (0..n)
        .map(|i| {
            let c = centers[i % centers.len()];
            vec![c[0] + noise.sample(&mut rng), c[1] + noise.sample(&mut rng)]
        })
        .collect()
}

fn assert_monotone(g: &GmmVocabulary<f64>) {
    for (i, w) in g.history.windows(2).enumerate() {
        if g.reinitialized_at.contains(&(i + 1)) {
            continue;
        }
        assert!(w[1] >= w[0] - 1e-9, "iteration {}: {} -> {}", i + 1, w[0], w[1]);
    }
}

#[test]
fn recovers_two_separated_clusters() {
    let truth = [[5.0, 5.0], [-5.0, -5.0]];
    let data = clusters(&truth, 2000, 1.0, 7);
    let g = fit_gmm(&data, &GmmParams { components: 2, seed: 42, ..Default::default() }).unwrap();
    let dist = |k: usize, t: usize| {
        let m = g.means().row(k);
        ((m[0] - truth[t][0]).powi(2) + (m[1] - truth[t][1]).powi(2)).sqrt()
    };
    // With two components the optimal assignment is one of two permutations.
    let perm = if dist(0, 0) + dist(1, 1) <= dist(0, 1) + dist(1, 0) { [0, 1] } else { [1, 0] };
    for (k, &t) in perm.iter().enumerate() {
        assert!(dist(k, t) < 0.1, "component {k} off by {}", dist(k, t));
        assert!((g.weights()[k] - 0.5).abs() <= 0.05);
    }
    let s: f64 = g.weights().iter().sum();
    assert!((s - 1.0).abs() <= 1e-9);
    assert_monotone(&g);
}

#[test]
fn overlapping_clusters_monotone_over_many_iterations() {
    let data = clusters(&[[0.0, 0.0], [1.0, 0.5], [-0.5, 1.5], [2.0, 2.0]], 3000, 0.8, 3);
    let g =
        fit_gmm(&data, &GmmParams { components: 8, seed: 1, tol: 0.0, max_iters: 60, ..Default::default() }).unwrap();
    assert!(g.history.len() > 20);
    assert_monotone(&g);
}

#[test]
fn different_seeds_give_valid_models() {
    let data = clusters(&[[0.0, 0.0], [3.0, 3.0], [0.0, 3.0]], 900, 0.7, 11);
    for seed in 0..5 {
        let g = fit_gmm(&data, &GmmParams { components: 3, seed, ..Default::default() }).unwrap();
        assert_monotone(&g);
        assert!(g.weights().iter().all(|&w| w > 0.0));
        assert!(g.sigmas().as_slice().iter().all(|&s| s * s >= 1e-4 - 1e-15));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn em_is_monotone(seed in 0u64..1000, k in 1usize..5, spread in 0.1f64..4.0) {
        let data = clusters(&[[0.0, 0.0], [spread, -spread], [spread, spread]], 200, 1.0, seed);
        let g = fit_gmm(&data, &GmmParams { components: k, seed, max_iters: 40, ..Default::default() }).unwrap();
        assert_monotone(&g);
        let s: f64 = g.weights().iter().sum();
        prop_assert!((s - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn posterior_sums_to_one(x in -1e4f64..1e4, y in -1e4f64..1e4, seed in 0u64..50) {
        let data = clusters(&[[0.0, 0.0], [4.0, 4.0]], 100, 1.0, seed);
        let g = fit_gmm(&data, &GmmParams { components: 3, seed, max_iters: 20, ..Default::default() }).unwrap();
        let gamma = g.posterior(&[x, y]).unwrap();
        let s: f64 = gamma.iter().sum();
        prop_assert!((s - 1.0).abs() <= 1e-12);
        prop_assert!(gamma.iter().all(|&v| v >= 0.0 && v.is_finite()));
    }
}
