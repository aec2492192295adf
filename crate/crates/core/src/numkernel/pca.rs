use crate::error::{Error, Result};
use crate::numkernel::{symmetric_eigen, Matrix};
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct Pca<T> {
    /// `k x n_features`, orthonormal rows, descending explained variance.
    pub components: Matrix<T>,
    /// `n_samples x k`, centred data projected on the components.
    pub projections: Matrix<T>,
    pub explained_variance: Vec<T>,
    pub mean: Vec<T>,
}

/// Top-`k` principal components of the rows of `x`.
///
/// Data are centred but not standardised. Each component is signed so that
/// its largest-magnitude entry is positive (first such entry on ties).
pub fn pca_top_k<T: Scalar>(x: &Matrix<T>, k: usize) -> Result<Pca<T>> {
    let (n, f) = x.shape();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("PCA needs at least 2 samples, got {n}")));
    }
    if k == 0 || k > n.min(f) {
        return Err(Error::InvalidArgument(format!(
            "k = {k} out of range 1..={} for {n}x{f} data",
            n.min(f)
        )));
    }
    let nt = T::count(n);
    let mean: Vec<T> = (0..f).map(|j| x.column(j).into_iter().sum::<T>() / nt).collect();
    let centred = Matrix::from_fn(n, f, |i, j| x.get(i, j) - mean[j]);
    let cov = centred.transpose().matmul(&centred)?.scale(T::one() / T::count(n - 1));
    let cov = Matrix::from_fn(f, f, |i, j| (cov.get(i, j) + cov.get(j, i)) * T::lit(0.5));

    let eig = symmetric_eigen(&cov)?;
    let top = eig.values[0];
    // Variance at rounding level of the data counts as none.
    let floor = T::epsilon() * T::lit(16.0) * x.max_abs();
    if !(top > floor * floor) {
        return Err(Error::DegenerateCovariance);
    }

    let mut comp = Vec::with_capacity(k * f);
    for r in 0..k {
        let row = eig.vectors.row(r);
        let mut pivot = 0;
        for (j, v) in row.iter().enumerate() {
            if v.abs() > row[pivot].abs() {
                pivot = j;
            }
        }
        let sign = if row[pivot] < T::zero() { -T::one() } else { T::one() };
        comp.extend(row.iter().map(|&v| v * sign));
    }
    let components = Matrix::from_raw(k, f, comp);
    let projections = centred.matmul_transposed(&components)?;
    Ok(Pca {
        components,
        projections,
        explained_variance: eig.values[..k].iter().map(|v| v.max(T::zero())).collect(),
        mean,
    })
}

impl<T: Scalar> Pca<T> {
    /// Squared Frobenius error of reconstructing `x` from the retained
    /// components.
    pub fn reconstruction_error(&self, x: &Matrix<T>) -> Result<T> {
        let recon = self.projections.matmul(&self.components)?;
        let mut err = T::zero();
        for i in 0..x.rows() {
            for j in 0..x.cols() {
                let d = x.get(i, j) - self.mean[j] - recon.get(i, j);
                err += d * d;
            }
        }
        Ok(err)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::{sample_gaussian, Seed};
    use approx::assert_abs_diff_eq;

    #[test]
    fn line_y_equals_x() {
        let x = Matrix::from_rows(&[vec![1.0, 1.0], vec![2.0, 2.0], vec![3.0, 3.0]]).unwrap();
        let pca = pca_top_k(&x, 1).unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert_abs_diff_eq!(pca.components.get(0, 0), s, epsilon = 1e-12);
        assert_abs_diff_eq!(pca.components.get(0, 1), s, epsilon = 1e-12);
        // projections of (1,1),(2,2),(3,3) after centring: -sqrt2, 0, sqrt2
        assert_abs_diff_eq!(pca.projections.get(2, 0), 2f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn two_point_set() {
        let x = Matrix::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        let pca = pca_top_k(&x, 1).unwrap();
        assert_abs_diff_eq!(pca.components.get(0, 0), 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(pca.components.get(0, 1), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn random_components_are_orthonormal() {
        let x = sample_gaussian::<f64>(10, 5, Seed(11), 0.0, 1.0).unwrap();
        let pca = pca_top_k(&x, 3).unwrap();
        let g = pca.components.matmul_transposed(&pca.components).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                if i == j {
                    assert!((g.get(i, j) - 1.0).abs() <= 1e-8);
                } else {
                    assert!(g.get(i, j).abs() < 1e-8);
                }
            }
        }
        assert!(pca.explained_variance.windows(2).all(|w| w[0] >= w[1]));
        for r in 0..3 {
            let row = pca.components.row(r);
            let pivot = row.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
            assert!(pivot > 0.0);
        }
    }

    #[test]
    fn errors() {
        let x = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert!(matches!(pca_top_k(&x, 3), Err(Error::InvalidArgument(_))));
        assert!(matches!(pca_top_k(&x, 0), Err(Error::InvalidArgument(_))));
        let one = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        assert!(matches!(pca_top_k(&one, 1), Err(Error::InvalidArgument(_))));
        let constant = Matrix::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        assert_eq!(pca_top_k(&constant, 1).unwrap_err(), Error::DegenerateCovariance);
    }

    #[test]
    fn reconstruction_error_non_increasing_in_k() {
        let x = sample_gaussian(12, 6, Seed(3), 1.0, 2.0).unwrap();
        let errs: Vec<f64> = (1..=6)
            .map(|k| pca_top_k(&x, k).unwrap().reconstruction_error(&x).unwrap())
            .collect();
        assert!(errs.windows(2).all(|w| w[1] <= w[0] + 1e-10), "{errs:?}");
        assert!(errs[5] < 1e-18);
    }
}
