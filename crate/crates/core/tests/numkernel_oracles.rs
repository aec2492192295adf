use attnlab_core::numkernel::{
    log_sum_exp, pca_top_k, row_softmax, sample_gaussian, spectral_norm_power, spectral_norm_sym, Matrix,
};
use attnlab_core::Seed;
use proptest::prelude::*;

/// Roots of `l^2 - tr l + det` for a symmetric 2x2 matrix.
fn eig2(a: f64, b: f64, d: f64) -> [f64; 2] {
    let tr = a + d;
    let det = a * d - b * b;
    let disc = (tr * tr / 4.0 - det).max(0.0).sqrt();
    [tr / 2.0 + disc, tr / 2.0 - disc]
}

/// Roots of the characteristic cubic of a symmetric 3x3 matrix, via the
/// trigonometric solution of the depressed cubic.
fn eig3(m: [[f64; 3]; 3]) -> [f64; 3] {
    let p1 = m[0][1].powi(2) + m[0][2].powi(2) + m[1][2].powi(2);
    let q = (m[0][0] + m[1][1] + m[2][2]) / 3.0;
    let p2 = (m[0][0] - q).powi(2) + (m[1][1] - q).powi(2) + (m[2][2] - q).powi(2) + 2.0 * p1;
    if p2 == 0.0 {
        return [q; 3];
    }
    let p = (p2 / 6.0).sqrt();
    let b = |i: usize, j: usize| (m[i][j] - if i == j { q } else { 0.0 }) / p;
    let det = b(0, 0) * (b(1, 1) * b(2, 2) - b(1, 2) * b(2, 1)) - b(0, 1) * (b(1, 0) * b(2, 2) - b(1, 2) * b(2, 0))
        + b(0, 2) * (b(1, 0) * b(2, 1) - b(1, 1) * b(2, 0));
    let phi = (det / 2.0).clamp(-1.0, 1.0).acos() / 3.0;
    let e1 = q + 2.0 * p * phi.cos();
    let e3 = q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos();
    [e1, 3.0 * q - e1 - e3, e3]
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

proptest! {
    #[test]
    fn spectral_norm_matches_quadratic_roots(a in -5.0f64..5.0, b in -5.0f64..5.0, d in -5.0f64..5.0) {
        let m = Matrix::from_rows(&[vec![a, b], vec![b, d]]).unwrap();
        let want = max_abs(&eig2(a, b, d));
        prop_assert!((spectral_norm_sym(&m).unwrap() - want).abs() <= 1e-8);
        let [hi, lo] = eig2(a, b, d);
        match spectral_norm_power(&m) {
            Ok(p) => prop_assert!((p.value - want).abs() <= 1e-8 * want.max(1.0)),
            // Allowed only when the two eigenvalues nearly coincide.
            Err(_) => prop_assert!(hi - lo < 1e-2 * want),
        }
    }

    #[test]
    fn power_iteration_separates_opposite_pairs(l in 0.1f64..5.0, eps in 1e-6f64..1e-2, theta in 0.0f64..3.14) {
        // Eigenvalues l and -(l - eps*l), rotated by theta.
        let (c, s) = (theta.cos(), theta.sin());
        let (l1, l2) = (l, -(l - eps * l));
        let m = Matrix::from_rows(&[
            vec![c * c * l1 + s * s * l2, c * s * (l1 - l2)],
            vec![c * s * (l1 - l2), s * s * l1 + c * c * l2],
        ]).unwrap();
        let m = Matrix::from_fn(2, 2, |i, j| 0.5 * (m.get(i, j) + m.get(j, i)));
        prop_assert!((spectral_norm_power(&m).unwrap().value - l).abs() <= 1e-8 * l.max(1.0));
    }

    #[test]
    fn spectral_norm_matches_cubic_roots(v in prop::array::uniform6(-5.0f64..5.0)) {
        let m = [[v[0], v[1], v[2]], [v[1], v[3], v[4]], [v[2], v[4], v[5]]];
        let mat = Matrix::from_rows(&m.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap();
        let want = max_abs(&eig3(m));
        prop_assert!((spectral_norm_sym(&mat).unwrap() - want).abs() <= 1e-8, "{} vs {}", spectral_norm_sym(&mat).unwrap(), want);
    }

    #[test]
    fn softmax_shift_invariant(row in prop::collection::vec(-50.0f64..50.0, 1..12), c in -300.0f64..300.0) {
        let z = Matrix::from_rows(&[row.clone()]).unwrap();
        let shifted = Matrix::from_rows(&[row.iter().map(|x| x + c).collect()]).unwrap();
        let a = row_softmax(&z).unwrap();
        let b = row_softmax(&shifted).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
        prop_assert!((a.data().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn lse_dominates_max(row in prop::collection::vec(-700.0f64..700.0, 1..12)) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!((log_sum_exp(&row).unwrap() - m).exp() >= 1.0);
    }

    #[test]
    fn pca_reconstruction_nonincreasing(seed in 0u64..500) {
        let x = sample_gaussian::<f64>(12, 5, Seed(seed), 0.0, 1.0).unwrap();
        let errs: Vec<f64> = (1..=5).map(|k| pca_top_k(&x, k).unwrap().reconstruction_error(&x).unwrap()).collect();
        for w in errs.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-10);
        }
    }
}

#[test]
fn hand_values() {
    let p = row_softmax(&Matrix::<f64>::from_rows(&[vec![2.0, 1.0, 0.0]]).unwrap()).unwrap();
    for (x, want) in p.data().iter().zip([0.665241, 0.244728, 0.090031]) {
        assert!((x - want).abs() < 1e-6);
    }
    let big = row_softmax(&Matrix::<f64>::from_rows(&[vec![1000.0, 0.0]]).unwrap()).unwrap();
    assert!((big.get(0, 0) - 1.0).abs() < 1e-12 && big.get(0, 1) < 1e-12);
    assert!((log_sum_exp(&[2.0f64, 1.0, 0.0]).unwrap() - 2.407606).abs() < 1e-6);
    let h = Matrix::<f64>::from_rows(&[vec![0.25, -0.25], vec![-0.25, 0.25]]).unwrap();
    assert!((spectral_norm_sym(&h).unwrap() - 0.5).abs() < 1e-12);
}

#[test]
fn line_data_principal_axis() {
    let x = Matrix::<f64>::from_rows(&[vec![1.0, 1.0], vec![2.0, 2.0], vec![3.0, 3.0]]).unwrap();
    let pca = pca_top_k(&x, 1).unwrap();
    let r = std::f64::consts::FRAC_1_SQRT_2;
    assert!((pca.components.get(0, 0) - r).abs() < 1e-12 && (pca.components.get(0, 1) - r).abs() < 1e-12);
}
