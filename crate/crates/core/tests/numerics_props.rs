use lyapctl::numerics::{cholesky_psd, solve_continuous_lyapunov, Matrix, RngStream};
use proptest::prelude::*;

fn random_lower(n: usize, rng: &mut RngStream) -> Matrix {
    Matrix::from_fn(n, n, |i, j| match i.cmp(&j) {
        std::cmp::Ordering::Greater => rng.standard_normal(),
        std::cmp::Ordering::Equal => 0.1 + rng.standard_normal().abs(),
        std::cmp::Ordering::Less => 0.0,
    })
}

/// Smallest eigenvalue of an SPD matrix by power iteration on `cI − P`.
fn min_eigenvalue(p: &Matrix) -> f64 {
    let n = p.rows();
    let c = (0..n).map(|i| (0..n).map(|j| p[(i, j)].abs()).sum::<f64>()).fold(0.0, f64::max);
    let shifted = Matrix::identity(n).scale(c).sub(p).unwrap();
    let mut v = vec![1.0; n];
    v[0] = 2.0;
    let mut mu = 0.0;
    for _ in 0..5000 {
        let w = shifted.matvec(&v).unwrap();
        let norm = w.iter().map(|a| a * a).sum::<f64>().sqrt();
        mu = v.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() / v.iter().map(|a| a * a).sum::<f64>();
        v = w.into_iter().map(|a| a / norm).collect();
    }
    c - mu
}

#[test]
fn power_iteration_confirms_positive_spectrum() {
    let mut rng = RngStream::new(5, 0);
    for _ in 0..20 {
        let l = random_lower(4, &mut rng);
        let p = cholesky_psd(&l).unwrap();
        assert!(min_eigenvalue(&p) > 0.0);
    }
}

#[test]
fn rng_reproducible_over_ten_thousand_draws() {
    let mut a = RngStream::new(77, 4);
    let mut b = RngStream::new(77, 4);
    for _ in 0..10_000 {
        assert_eq!(a.standard_normal().to_bits(), b.standard_normal().to_bits());
    }
}

#[test]
fn lyapunov_residual_on_random_stable_matrices() {
    let mut rng = RngStream::new(6, 0);
    let mut solved = 0;
    while solved < 50 {
        let n = 2 + rng.index(4);
        // Shifting by the Gershgorin radius makes A Hurwitz.
        let mut a = Matrix::from_fn(n, n, |_, _| rng.standard_normal());
        let radius = (0..n).map(|i| (0..n).map(|j| a[(i, j)].abs()).sum::<f64>()).fold(0.0, f64::max);
        for i in 0..n {
            a[(i, i)] -= radius + 0.1;
        }
        let q = Matrix::identity(n);
        let p = solve_continuous_lyapunov(&a, &q).unwrap();
        let res = a.transpose().matmul(&p).unwrap().add(&p.matmul(&a).unwrap()).unwrap().add(&q).unwrap();
        assert!(res.max_abs() < 1e-9 * p.max_abs().max(1.0), "residual {}", res.max_abs());
        assert!(min_eigenvalue(&p) > 0.0);
        solved += 1;
    }
}

proptest! {
    #[test]
    fn cholesky_psd_gives_positive_quadratic_forms(seed in 0u64..100_000, n in 1usize..6) {
        let mut rng = RngStream::new(seed, 0);
        let l = random_lower(n, &mut rng);
        let p = cholesky_psd(&l).unwrap();
        prop_assert_eq!(p.symmetrized(), p.clone());
        for _ in 0..20 {
            let x: Vec<f64> = (0..n).map(|_| rng.standard_normal()).collect();
            prop_assert!(p.quad_form(&x) > 0.0);
        }
    }

    #[test]
    fn streams_are_reproducible(seed in any::<u64>(), stream in 0u64..1000) {
        let mut a = RngStream::new(seed, stream);
        let mut b = RngStream::new(seed, stream);
        for _ in 0..100 {
            prop_assert_eq!(a.standard_normal().to_bits(), b.standard_normal().to_bits());
        }
    }
}
