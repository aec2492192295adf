//! Symmetric eigensolvers and the spectral norms built on them.
//!
//! The primary route is cyclic Jacobi, which is exact enough for the small
//! dense matrices used here and returns an orthonormal eigenbasis. Power
//! iteration is kept as an independent fallback for when Jacobi fails to
//! converge.

use crate::error::{Error, Result};
use crate::numkernel::Matrix;
use crate::scalar::{norm2, Scalar};

/// Absolute symmetry tolerance accepted by the symmetric routines.
pub const SYMMETRY_TOL: f64 = 1e-10;
/// Relative convergence tolerance for power iteration.
pub const POWER_TOL: f64 = 1e-10;
/// Iteration cap for power iteration.
pub const POWER_MAX_ITER: usize = 10_000;

const JACOBI_MAX_SWEEPS: usize = 100;

/// Eigenvalues sorted descending, with matching unit eigenvectors stored as
/// the rows of `vectors`.
#[derive(Debug, Clone)]
pub struct SymmetricEigen<T> {
    pub values: Vec<T>,
    pub vectors: Matrix<T>,
}

fn check_symmetric<T: Scalar>(a: &Matrix<T>) -> Result<()> {
    let (i, j, gap) = a.asymmetry()?;
    if gap > T::lit(SYMMETRY_TOL) {
        return Err(Error::NotSymmetric { i, j, gap: gap.to_f64_lossy() });
    }
    Ok(())
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
pub fn symmetric_eigen<T: Scalar>(a: &Matrix<T>) -> Result<SymmetricEigen<T>> {
    check_symmetric(a)?;
    if !a.all_finite() {
        return Err(Error::NonFinite("symmetric_eigen input"));
    }
    let n = a.rows();
    // Work on the exactly symmetrised matrix.
    let mut m = Matrix::from_fn(n, n, |i, j| (a.get(i, j) + a.get(j, i)) * T::lit(0.5));
    let mut v = Matrix::<T>::identity(n);

    let scale = m.frobenius_norm();
    if scale == T::zero() {
        return Ok(SymmetricEigen { values: vec![T::zero(); n], vectors: v });
    }
    let threshold = T::epsilon() * scale;

    let mut converged = n < 2;
    for _ in 0..JACOBI_MAX_SWEEPS {
        let off: T = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m.get(i, j) * m.get(i, j))
            .sum::<T>()
            .sqrt();
        if off <= threshold {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m.get(p, q);
                if apq == T::zero() {
                    continue;
                }
                let app = m.get(p, p);
                let aqq = m.get(q, q);
                let theta = (aqq - app) / (T::lit(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m.get(k, p);
                    let mkq = m.get(k, q);
                    m.set(k, p, c * mkp - s * mkq);
                    m.set(k, q, s * mkp + c * mkq);
                }
                for k in 0..n {
                    let mpk = m.get(p, k);
                    let mqk = m.get(q, k);
                    m.set(p, k, c * mpk - s * mqk);
                    m.set(q, k, s * mpk + c * mqk);
                }
                // The rotation annihilates (p, q) analytically; drop the
                // rounding residue so the off-diagonal norm can reach zero.
                m.set(p, q, T::zero());
                m.set(q, p, T::zero());
                // Columns of `v` accumulate the rotations.
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    if !converged {
        return Err(Error::NoConvergence("Jacobi eigensolver"));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m.get(j, j).partial_cmp(&m.get(i, i)).unwrap_or(std::cmp::Ordering::Equal));
    let values = order.iter().map(|&i| m.get(i, i)).collect();
    let vectors = Matrix::from_fn(n, n, |r, k| v.get(k, order[r]));
    Ok(SymmetricEigen { values, vectors })
}

/// Largest absolute eigenvalue of a symmetric matrix.
pub fn spectral_norm_sym<T: Scalar>(a: &Matrix<T>) -> Result<T> {
    match symmetric_eigen(a) {
        Ok(eig) => Ok(eig.values.iter().fold(T::zero(), |m, x| m.max(x.abs()))),
        Err(Error::NoConvergence(_)) => Ok(spectral_norm_power(a)?.value),
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PowerEstimate<T> {
    pub value: T,
    /// Iterations summed over both extreme-eigenvalue runs.
    pub iterations: usize,
}

fn start_vector<T: Scalar>(n: usize) -> Vec<T> {
    // Non-constant on purpose: the all-ones vector is in the kernel of every
    // softmax Hessian.
    let mut v: Vec<T> = (0..n)
        .map(|i| {
            let k = (i * 7 + 3) % 11;
            T::one() + T::count(k) / T::lit(11.0) + T::count(i) / T::count(n.max(1))
        })
        .collect();
    let nv = norm2(&v);
    for x in &mut v {
        *x /= nv;
    }
    v
}

fn apply<T: Scalar>(a: &Matrix<T>, v: &[T]) -> Vec<T> {
    (0..a.rows()).map(|i| crate::scalar::dot(a.row(i), v)).collect()
}

/// Power iteration on `sign * A + shift * I`, which is positive definite for
/// `shift` above the Gershgorin radius. Returns the converged iterate.
fn shifted_power<T: Scalar>(
    a: &Matrix<T>,
    sign: T,
    shift: T,
    iterations: &mut usize,
) -> Result<Vec<T>> {
    let tol = T::lit(POWER_TOL);
    let mut v = start_vector::<T>(a.rows());
    while *iterations < POWER_MAX_ITER {
        *iterations += 1;
        let w: Vec<T> = apply(a, &v).iter().zip(&v).map(|(av, vi)| sign * *av + shift * *vi).collect();
        let mu = crate::scalar::dot(&v, &w);
        // Residual test rather than step size: on a clustered spectrum the
        // Rayleigh quotient creeps, and a small step says nothing about
        // accuracy.
        let resid = w
            .iter()
            .zip(&v)
            .fold(T::zero(), |acc, (wi, vi)| acc + (*wi - mu * *vi).powi(2))
            .sqrt();
        if resid <= tol * mu {
            return Ok(v);
        }
        let nw = norm2(&w);
        for (vi, wi) in v.iter_mut().zip(&w) {
            *vi = *wi / nw;
        }
    }
    Err(Error::NoConvergence("power iteration"))
}

/// Largest absolute eigenvalue of a symmetric matrix by power iteration.
///
/// Runs separately for the top and bottom of the spectrum on shifted,
/// positive definite copies of `A`, so a `+lambda`/`-lambda` pair converges
/// as fast as a well separated one. Each extreme is read off as the Rayleigh
/// quotient of `A` itself, free of shift cancellation. Fails with
/// `NoConvergence` only on strongly clustered spectra.
pub fn spectral_norm_power<T: Scalar>(a: &Matrix<T>) -> Result<PowerEstimate<T>> {
    check_symmetric(a)?;
    let n = a.rows();
    let radius = (0..n)
        .map(|i| a.row(i).iter().fold(T::zero(), |s, x| s + x.abs()))
        .fold(T::zero(), |m, x| m.max(x));
    if radius == T::zero() {
        return Ok(PowerEstimate { value: T::zero(), iterations: 0 });
    }
    let shift = radius * T::lit(1.1);
    let mut iterations = 0;
    let top = shifted_power(a, T::one(), shift, &mut iterations)?;
    let bottom = shifted_power(a, -T::one(), shift, &mut iterations)?;
    let rayleigh = |v: &[T]| crate::scalar::dot(v, &apply(a, v));
    let value = rayleigh(&top).abs().max(rayleigh(&bottom).abs());
    Ok(PowerEstimate { value, iterations })
}

/// Operator 2-norm of a general matrix: `sqrt(lambda_max(A^T A))`.
pub fn spectral_norm<T: Scalar>(a: &Matrix<T>) -> Result<T> {
    // Gram matrix on the smaller side.
    let gram = if a.rows() >= a.cols() {
        a.transpose().matmul(a)?
    } else {
        a.matmul(&a.transpose())?
    };
    let gram = Matrix::from_fn(gram.rows(), gram.cols(), |i, j| {
        (gram.get(i, j) + gram.get(j, i)) * T::lit(0.5)
    });
    Ok(spectral_norm_sym(&gram)?.max(T::zero()).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn m(rows: &[Vec<f64>]) -> Matrix<f64> {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn examples() {
        assert_abs_diff_eq!(spectral_norm_sym(&Matrix::<f64>::identity(2)).unwrap(), 1.0, epsilon = 1e-14);
        let h = m(&[vec![0.25, -0.25], vec![-0.25, 0.25]]);
        assert_abs_diff_eq!(spectral_norm_sym(&h).unwrap(), 0.5, epsilon = 1e-14);
        assert_eq!(spectral_norm_sym(&Matrix::<f64>::zeros(3, 3)).unwrap(), 0.0);
    }

    #[test]
    fn rejects_non_square_and_asymmetric() {
        assert!(matches!(spectral_norm_sym(&Matrix::<f64>::zeros(2, 3)), Err(Error::NotSquare { .. })));
        let a = m(&[vec![1.0, 0.0], vec![1e-6, 1.0]]);
        assert!(matches!(spectral_norm_sym(&a), Err(Error::NotSymmetric { .. })));
        // Within tolerance is accepted.
        let b = m(&[vec![1.0, 0.0], vec![1e-12, 1.0]]);
        assert!(spectral_norm_sym(&b).is_ok());
    }

    #[test]
    fn negative_eigenvalue_dominates() {
        let a = m(&[vec![-3.0, 0.0], vec![0.0, 1.0]]);
        assert_abs_diff_eq!(spectral_norm_sym(&a).unwrap(), 3.0, epsilon = 1e-14);
        assert_abs_diff_eq!(spectral_norm_power(&a).unwrap().value, 3.0, epsilon = 1e-8);
        // +/- pair of equal magnitude.
        let b = m(&[vec![0.0, 2.0], vec![2.0, 0.0]]);
        assert_abs_diff_eq!(spectral_norm_power(&b).unwrap().value, 2.0, epsilon = 1e-8);
    }

    #[test]
    fn eigenvectors_are_orthonormal_and_reconstruct() {
        let a = m(&[
            vec![4.0, 1.0, -2.0, 0.5],
            vec![1.0, 2.0, 0.0, 1.0],
            vec![-2.0, 0.0, 3.0, -1.5],
            vec![0.5, 1.0, -1.5, 1.0],
        ]);
        let eig = symmetric_eigen(&a).unwrap();
        let v = &eig.vectors;
        let gram = v.matmul_transposed(v).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(gram.get(i, j), want, epsilon = 1e-12);
            }
        }
        // A = V^T diag(lambda) V
        let recon = v.transpose().matmul(&Matrix::diag(&eig.values)).unwrap().matmul(v).unwrap();
        for (x, y) in recon.data().iter().zip(a.data()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
        assert!(eig.values.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn power_iteration_handles_kernel_start() {
        // Softmax-covariance shaped: ones vector is in the kernel.
        let p = [0.7, 0.2, 0.1];
        let c = Matrix::from_fn(3, 3, |i, j| if i == j { p[i] * (1.0 - p[i]) } else { -p[i] * p[j] });
        let jac = spectral_norm_sym(&c).unwrap();
        let pow = spectral_norm_power(&c).unwrap();
        assert_abs_diff_eq!(jac, pow.value, epsilon = 1e-8);
    }

    #[test]
    fn general_spectral_norm() {
        let a = m(&[vec![3.0, 0.0, 0.0], vec![0.0, 4.0, 0.0]]);
        assert_abs_diff_eq!(spectral_norm(&a).unwrap(), 4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(spectral_norm(&a.transpose()).unwrap(), 4.0, epsilon = 1e-12);
    }
}
