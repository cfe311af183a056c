use lanam::numerics::{cholesky_default, gelu, gelu_deriv, logdet_pd, solve_pd, Matrix, SymMatrix};
use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `B Bᵀ + δ I` with Gaussian-ish entries, for a random well-posed PD matrix.
fn random_pd(dim: usize, seed: u64) -> SymMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b: Vec<f64> = (0..dim * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    SymMatrix::from_upper_fn(dim, |i, j| {
        let s: f64 = (0..dim).map(|k| b[i * dim + k] * b[j * dim + k]).sum();
        if i == j {
            s + 0.1
        } else {
            s
        }
    })
}

fn to_na(a: &SymMatrix) -> DMatrix<f64> {
    DMatrix::from_fn(a.dim(), a.dim(), |i, j| a.get(i, j))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn cholesky_reconstructs(dim in 1usize..=32, seed in any::<u64>()) {
        let a = random_pd(dim, seed);
        let l = cholesky_default(&a).unwrap();
        prop_assert_eq!(l.jitter_applied(), 0.0);
        let r = l.reconstruct();
        let scale = a.as_slice().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (x, y) in r.as_slice().iter().zip(a.as_slice()) {
            prop_assert!((x - y).abs() <= 1e-8 * scale);
        }
    }

    #[test]
    fn logdet_matches_eigenvalues(dim in 1usize..=8, seed in any::<u64>()) {
        let a = random_pd(dim, seed);
        let eig = SymmetricEigen::new(to_na(&a)).eigenvalues;
        let oracle: f64 = eig.iter().map(|v| v.ln()).sum();
        let got = logdet_pd(&a).unwrap();
        prop_assert!((got - oracle).abs() <= 1e-8 * oracle.abs().max(1.0), "{} vs {}", got, oracle);
    }

    #[test]
    fn solve_matches_reference(dim in 1usize..=12, seed in any::<u64>()) {
        let a = random_pd(dim, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let b: Vec<f64> = (0..dim * 2).map(|_| rng.random_range(-2.0..2.0)).collect();
        let x = solve_pd(&a, &Matrix::from_row_major(dim, 2, b.clone()).unwrap()).unwrap();
        let oracle = to_na(&a).lu().solve(&DMatrix::from_row_slice(dim, 2, &b)).unwrap();
        for i in 0..dim {
            for j in 0..2 {
                let o = oracle[(i, j)];
                prop_assert!((x.get(i, j) - o).abs() <= 1e-8 * o.abs().max(1.0));
            }
        }
    }

    #[test]
    fn inverse_is_inverse(dim in 1usize..=10, seed in any::<u64>()) {
        let a = random_pd(dim, seed);
        let inv = cholesky_default(&a).unwrap().inverse();
        let prod = a.to_matrix().matmul(&inv.to_matrix()).unwrap();
        for i in 0..dim {
            for j in 0..dim {
                let target = if i == j { 1.0 } else { 0.0 };
                prop_assert!((prod.get(i, j) - target).abs() < 1e-8);
            }
        }
    }
}

#[test]
fn gelu_derivative_matches_central_differences() {
    let h = 1e-5;
    let n = 2401;
    for i in 0..n {
        let x = -6.0 + 12.0 * i as f64 / (n - 1) as f64;
        let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
        assert!((gelu_deriv(x) - fd).abs() < 1e-7, "x = {x}");
    }
}

#[test]
fn singular_matrix_needs_jitter_or_fails() {
    let a = SymMatrix::from_row_major(2, vec![1.0, 1.0, 1.0, 1.0]).unwrap();
    let l = cholesky_default(&a).unwrap();
    assert!(l.jitter_applied() > 0.0);
    let neg = SymMatrix::diagonal(&[1.0, -1.0]);
    assert!(matches!(cholesky_default(&neg), Err(lanam::Error::NotPositiveDefinite { .. })));
}
