use crate::error::{Error, Result};
use crate::numkernel::Matrix;
use crate::scalar::Scalar;

/// Softmax of one vector via max-shifted exponentials.
pub fn softmax<T: Scalar>(z: &[T]) -> Result<Vec<T>> {
    if z.is_empty() {
        return Err(Error::Empty("softmax input"));
    }
    if z.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFiniteLogits);
    }
    Ok(softmax_unchecked(z))
}

pub(crate) fn softmax_unchecked<T: Scalar>(z: &[T]) -> Vec<T> {
    let max = z.iter().copied().fold(T::neg_infinity(), T::max);
    let mut out: Vec<T> = z.iter().map(|&x| (x - max).exp()).collect();
    let total: T = out.iter().copied().sum();
    for p in &mut out {
        *p /= total;
    }
    out
}

/// Softmax of `alpha * z`.
pub fn tempered_softmax<T: Scalar>(z: &[T], alpha: T) -> Result<Vec<T>> {
    let scaled: Vec<T> = z.iter().map(|&x| alpha * x).collect();
    softmax(&scaled)
}

/// Row-wise softmax.
pub fn row_softmax<T: Scalar>(z: &Matrix<T>) -> Result<Matrix<T>> {
    if !z.all_finite() {
        return Err(Error::NonFiniteLogits);
    }
    let mut data = Vec::with_capacity(z.rows() * z.cols());
    for i in 0..z.rows() {
        data.extend(softmax_unchecked(z.row(i)));
    }
    Ok(Matrix::from_raw(z.rows(), z.cols(), data))
}

/// `log sum_j e^{z_j}`, evaluated as `max(z) + log sum_j e^{z_j - max(z)}`.
pub fn log_sum_exp<T: Scalar>(z: &[T]) -> Result<T> {
    if z.is_empty() {
        return Err(Error::Empty("log_sum_exp input"));
    }
    if z.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFiniteLogits);
    }
    let max = z.iter().copied().fold(T::neg_infinity(), T::max);
    let total: T = z.iter().map(|&x| (x - max).exp()).sum();
    Ok(max + total.ln())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn uniform_row() {
        let p = softmax(&[0.0f64, 0.0, 0.0]).unwrap();
        for x in p {
            assert_abs_diff_eq!(x, 1.0 / 3.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn hand_checked_row() {
        // e^2, e^1, e^0 over their sum 11.107337927...
        let p = softmax(&[2.0f64, 1.0, 0.0]).unwrap();
        let expected = [0.665_240_955_774_821_6, 0.244_728_471_054_797_64, 0.090_030_573_170_380_46];
        for (a, b) in p.iter().zip(expected) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn large_logits_do_not_overflow() {
        let p = softmax(&[1000.0f64, 0.0]).unwrap();
        assert_abs_diff_eq!(p[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p[1], 0.0, epsilon = 1e-12);
        let m = Matrix::from_rows(&[vec![700.0, -700.0, 699.0]]).unwrap();
        let s = row_softmax(&m).unwrap();
        assert!(s.all_finite());
    }

    #[test]
    fn non_finite_logits_rejected() {
        assert_eq!(softmax(&[f64::INFINITY, 0.0]).unwrap_err(), Error::NonFiniteLogits);
        let z = Matrix::from_raw(1, 2, vec![f64::NAN, 1.0]);
        assert_eq!(row_softmax(&z).unwrap_err(), Error::NonFiniteLogits);
    }

    #[test]
    fn log_sum_exp_examples() {
        assert_abs_diff_eq!(log_sum_exp(&[0.0f64, 0.0]).unwrap(), 2f64.ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(log_sum_exp(&[2.0f64, 1.0, 0.0]).unwrap(), 2.407_605_964_444_380, epsilon = 1e-12);
        assert_eq!(log_sum_exp(&[5.0f64]).unwrap(), 5.0);
        assert_eq!(log_sum_exp::<f64>(&[]).unwrap_err(), Error::Empty("log_sum_exp input"));
    }

    #[test]
    fn works_at_single_precision() {
        let p = softmax(&[2.0f32, 1.0, 0.0]).unwrap();
        assert!((p[0] - 0.665_241).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn row_sums_are_one(row in prop::collection::vec(-700.0f64..700.0, 1..32)) {
            let p = softmax(&row).unwrap();
            let s: f64 = p.iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
            prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
        }

        #[test]
        fn shift_invariance(row in prop::collection::vec(-50.0f64..50.0, 1..16), c in -100.0f64..100.0) {
            let shifted: Vec<f64> = row.iter().map(|x| x + c).collect();
            let a = softmax(&row).unwrap();
            let b = softmax(&shifted).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }

        #[test]
        fn lse_dominates_max(row in prop::collection::vec(-300.0f64..300.0, 1..16)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = log_sum_exp(&row).unwrap();
            prop_assert!((lse - max).exp() >= 1.0);
        }
    }
}
