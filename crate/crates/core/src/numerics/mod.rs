//! Dense linear algebra and seeded randomness shared by the rest of the crate.

mod matrix;
mod rng;

pub use matrix::Matrix;
pub use rng::{gaussian, RngStream};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("singular system: {0}")]
    Singular(String),
    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("iteration did not converge: {0}")]
    NoConvergence(String),
}

/// `ln(1 + eˣ)`, evaluated without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `P = L Lᵀ` for a lower-triangular factor with positive diagonal.
pub fn cholesky_psd(lower: &Matrix) -> Result<Matrix, NumericsError> {
    if !lower.is_square() {
        return Err(NumericsError::Dimension(format!(
            "cholesky factor must be square, got {}x{}",
            lower.rows(),
            lower.cols()
        )));
    }
    let n = lower.rows();
    let mut p = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..=j).map(|k| lower[(i, k)] * lower[(j, k)]).sum();
            p[(i, j)] = s;
            p[(j, i)] = s;
        }
    }
    Ok(p)
}

/// Solves `AᵀP + PA = −Q` through the Kronecker-vectorised `n² × n²` system.
///
/// The result is symmetrised and checked for positive definiteness, which
/// fails exactly when `A` is not Hurwitz (for SPD `Q`).
pub fn solve_continuous_lyapunov(a: &Matrix, q: &Matrix) -> Result<Matrix, NumericsError> {
    if !a.is_square() || !q.is_square() || a.rows() != q.rows() {
        return Err(NumericsError::Dimension(format!(
            "lyapunov equation needs square A and Q of equal size, got {}x{} and {}x{}",
            a.rows(),
            a.cols(),
            q.rows(),
            q.cols()
        )));
    }
    let n = a.rows();
    let nn = n * n;
    // Row (i, j) of the system is entry (i, j) of AᵀP + PA.
    let mut big = Matrix::zeros(nn, nn);
    for i in 0..n {
        for j in 0..n {
            let row = i * n + j;
            for k in 0..n {
                big[(row, k * n + j)] += a[(k, i)];
                big[(row, i * n + k)] += a[(k, j)];
            }
        }
    }
    let rhs = Matrix::from_vec(nn, 1, q.as_slice().iter().map(|v| -v).collect())?;
    let vec_p = big.solve(&rhs).map_err(|e| match e {
        NumericsError::Singular(msg) => NumericsError::Singular(format!(
            "vectorised Lyapunov system is singular (A has eigenvalues λᵢ + λⱼ = 0, so it is not Hurwitz): {msg}"
        )),
        other => other,
    })?;
    let p = Matrix::from_vec(n, n, vec_p.into_vec())?.symmetrized();
    p.cholesky().map_err(|_| {
        NumericsError::NotPositiveDefinite(
            "Lyapunov solution is not positive definite, so A is not Hurwitz".into(),
        )
    })?;
    Ok(p)
}

/// Discrete-time LQR gain for the Euler discretisation `x⁺ = (I + A·dt)x + B·dt·u`
/// with stage cost `dt·(xᵀQx + uᵀRu)`, by fixed-point Riccati iteration.
///
/// The returned `K` is used as `u = −K x`.
pub fn lqr_gain(a: &Matrix, b: &Matrix, q: &Matrix, r: &Matrix, dt: f64) -> Result<Matrix, NumericsError> {
    let n = a.rows();
    let m = b.cols();
    if !a.is_square() || b.rows() != n || q.rows() != n || !q.is_square() || r.rows() != m || !r.is_square() {
        return Err(NumericsError::Dimension("inconsistent LQR problem shapes".into()));
    }
    if !(dt > 0.0) {
        return Err(NumericsError::Argument(format!("dt must be positive, got {dt}")));
    }
    let ad = Matrix::identity(n).add(&a.scale(dt))?;
    let bd = b.scale(dt);
    let qd = q.scale(dt);
    let rd = r.scale(dt);
    let bdt = bd.transpose();
    let mut p = qd.clone();
    for _ in 0..200_000 {
        let pb = p.matmul(&bd)?;
        let gram = rd.add(&bdt.matmul(&pb)?)?;
        let k = gram.solve(&bdt.matmul(&p)?.matmul(&ad)?)?;
        let closed = ad.sub(&bd.matmul(&k)?)?;
        let next = qd
            .add(&k.transpose().matmul(&rd)?.matmul(&k)?)?
            .add(&closed.transpose().matmul(&p)?.matmul(&closed)?)?
            .symmetrized();
        let delta = next.sub(&p)?.max_abs();
        p = next;
        if !p.is_finite() {
            return Err(NumericsError::NoConvergence("Riccati iterate diverged".into()));
        }
        if delta <= 1e-12 * p.max_abs().max(1.0) {
            return Ok(k);
        }
    }
    Err(NumericsError::NoConvergence("Riccati iteration hit its cap".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_psd_identity_and_scalar() {
        assert_eq!(cholesky_psd(&Matrix::identity(3)).unwrap(), Matrix::identity(3));
        let p = cholesky_psd(&Matrix::from_rows(&[vec![2.0]]).unwrap()).unwrap();
        assert_eq!(p[(0, 0)], 4.0);
    }

    #[test]
    fn cholesky_psd_rejects_non_square() {
        assert!(matches!(cholesky_psd(&Matrix::zeros(2, 3)), Err(NumericsError::Dimension(_))));
    }

    #[test]
    fn lyapunov_scalar_and_diagonal() {
        let a = Matrix::from_rows(&[vec![-1.0]]).unwrap();
        let q = Matrix::from_rows(&[vec![4.0]]).unwrap();
        let p = solve_continuous_lyapunov(&a, &q).unwrap();
        assert!((p[(0, 0)] - 2.0).abs() < 1e-14);

        let a = Matrix::identity(2).scale(-1.0);
        let q = Matrix::identity(2).scale(2.0);
        let p = solve_continuous_lyapunov(&a, &q).unwrap();
        assert!(p.sub(&Matrix::identity(2)).unwrap().max_abs() < 1e-14);
    }

    #[test]
    fn lyapunov_companion_residual() {
        let a = Matrix::from_rows(&[vec![0.0, 1.0], vec![-2.0, -3.0]]).unwrap();
        let q = Matrix::identity(2);
        let p = solve_continuous_lyapunov(&a, &q).unwrap();
        let res = a.transpose().matmul(&p).unwrap().add(&p.matmul(&a).unwrap()).unwrap().add(&q).unwrap();
        assert!(res.max_abs() < 1e-10);
    }

    #[test]
    fn lyapunov_rejects_unstable() {
        let a = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, -2.0]]).unwrap();
        assert!(solve_continuous_lyapunov(&a, &Matrix::identity(2)).is_err());
        let marginal = Matrix::zeros(2, 2);
        assert!(matches!(
            solve_continuous_lyapunov(&marginal, &Matrix::identity(2)),
            Err(NumericsError::Singular(_))
        ));
    }

    #[test]
    fn lqr_stabilises_unstable_scalar() {
        let a = Matrix::from_rows(&[vec![2.0]]).unwrap();
        let b = Matrix::identity(1);
        let k = lqr_gain(&a, &b, &Matrix::identity(1), &Matrix::identity(1), 0.001).unwrap();
        // Continuous LQR gain for ẋ = 2x + u, q = r = 1 is 2 + √5.
        assert!((k[(0, 0)] - (2.0 + 5f64.sqrt())).abs() < 0.02, "{k:?}");
    }

    #[test]
    fn softplus_roundtrip() {
        for y in [1e-6, 0.3, 1.0, 7.0, 45.0] {
            assert!((softplus(softplus_inv(y)) - y).abs() < 1e-9 * y.max(1.0));
        }
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
    }
}
