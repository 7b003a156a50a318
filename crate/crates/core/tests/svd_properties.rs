use energycomp_core::numerics::{matmul, svd, truncate, Matrix};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn matrix_strategy(max_dim: usize) -> impl Strategy<Value = Matrix> {
    (1..=max_dim, 1..=max_dim).prop_flat_map(|(m, n)| {
        prop::collection::vec(-1.0f32..1.0, m * n).prop_map(move |d| Matrix::from_vec(m, n, d).unwrap())
    })
}

fn frob_diff(a: &Matrix, b: &Matrix) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (f64::from(*x) - f64::from(*y)).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn max_gram_error(q: &Matrix) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..q.cols() {
        for j in 0..q.cols() {
            let dot: f64 = (0..q.rows())
                .map(|r| f64::from(q.get(r, i)) * f64::from(q.get(r, j)))
                .sum();
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((dot - target).abs());
        }
    }
    worst
}

fn tail_energy(sigma: &[f32], r: usize) -> f64 {
    sigma[r..].iter().map(|s| f64::from(*s).powi(2)).sum::<f64>().sqrt()
}

#[test]
fn eight_by_five_orthonormal_factors() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let data: Vec<f32> = (0..40).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let a = Matrix::from_vec(8, 5, data).unwrap();
    let s = svd(&a).unwrap();
    assert_eq!(s.u.shape(), (8, 5));
    assert_eq!(s.v.shape(), (5, 5));
    assert!(max_gram_error(&s.u) < 1e-4);
    assert!(max_gram_error(&s.v) < 1e-4);
    assert!(frob_diff(&s.reconstruct(), &a) < 1e-4);
}

#[test]
fn exact_low_rank_matrix_is_recovered() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let b: Vec<f32> = (0..20 * 5).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let c: Vec<f32> = (0..5 * 15).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let a = matmul(&Matrix::from_vec(20, 5, b).unwrap(), &Matrix::from_vec(5, 15, c).unwrap()).unwrap();
    let s = svd(&a).unwrap();
    assert!(s.sigma[5..].iter().all(|&x| x < 1e-4 * s.sigma[0]), "{:?}", s.sigma);
    let rank5 = truncate(&s, 5).unwrap();
    assert_eq!(rank5.param_count(), 5 * (20 + 15));
    assert!(frob_diff(&rank5.product(), &a) < 1e-4);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn factors_are_orthonormal(a in matrix_strategy(12)) {
        let s = svd(&a).unwrap();
        prop_assert!(max_gram_error(&s.u) < 1e-4);
        prop_assert!(max_gram_error(&s.v) < 1e-4);
        prop_assert!(s.sigma.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(s.sigma.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn full_rank_reconstruction(a in matrix_strategy(12)) {
        let s = svd(&a).unwrap();
        prop_assert!(frob_diff(&s.reconstruct(), &a) < 1e-4);
    }

    #[test]
    fn transpose_has_same_spectrum(a in matrix_strategy(10)) {
        let s = svd(&a).unwrap();
        let t = svd(&a.transpose()).unwrap();
        prop_assert_eq!(s.sigma.len(), t.sigma.len());
        for (x, y) in s.sigma.iter().zip(&t.sigma) {
            prop_assert!((x - y).abs() < 1e-4, "{:?} vs {:?}", s.sigma, t.sigma);
        }
    }

    #[test]
    fn decomposition_is_deterministic(a in matrix_strategy(10)) {
        prop_assert_eq!(svd(&a).unwrap(), svd(&a).unwrap());
    }

    #[test]
    fn truncation_error_matches_tail(a in matrix_strategy(10), pick in 0usize..100) {
        let s = svd(&a).unwrap();
        let r = 1 + pick % s.len();
        let approx = truncate(&s, r).unwrap();
        prop_assert_eq!(approx.param_count(), r * (a.rows() + a.cols()));
        let err = frob_diff(&approx.product(), &a);
        prop_assert!((err - tail_energy(&s.sigma, r)).abs() < 1e-4);
    }

    #[test]
    fn truncation_beats_random_candidates(a in matrix_strategy(8), pick in 0usize..100, seed in any::<u64>()) {
        let s = svd(&a).unwrap();
        let r = 1 + pick % s.len();
        let best = frob_diff(&truncate(&s, r).unwrap().product(), &a);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..100 {
            let b: Vec<f32> = (0..a.rows() * r).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let c: Vec<f32> = (0..r * a.cols()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let cand = matmul(
                &Matrix::from_vec(a.rows(), r, b).unwrap(),
                &Matrix::from_vec(r, a.cols(), c).unwrap(),
            ).unwrap();
            prop_assert!(best <= frob_diff(&cand, &a) + 1e-4);
        }
    }
}
