use attnlab_core::analysis::{
    attention_hessian, curvature_report, entropy, entropy_alpha_report, lipschitz_report, restricted_entropy,
    restricted_softmax,
};
use attnlab_core::attention::attention_forward;
use attnlab_core::numkernel::{symmetric_eigen, tempered_softmax, Matrix};
use proptest::prelude::*;

fn logits() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, 2..12)
}

fn subset_of(m: usize, mask: u32) -> Vec<usize> {
    let s: Vec<usize> = (0..m).filter(|j| mask & (1 << j) != 0).collect();
    if s.is_empty() { vec![0] } else { s }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(400))]

    #[test]
    fn tempering_routes_agree(
        q in prop::collection::vec(-2.0f64..2.0, 12),
        k in prop::collection::vec(-2.0f64..2.0, 16),
        gamma in 0.5f64..3.0,
    ) {
        let q = Matrix::new(3, 4, q).unwrap();
        let k = Matrix::new(4, 4, k).unwrap();
        let v = Matrix::identity(4);
        let base = attention_forward(&q, &k, &v, 4).unwrap();
        let a = attention_forward(&q.scale(gamma), &k, &v, 4).unwrap().probabilities;
        let b = attention_forward(&q, &k.scale(gamma), &v, 4).unwrap().probabilities;
        for i in 0..3 {
            let t = tempered_softmax(base.logits.row(i), gamma).unwrap();
            for j in 0..4 {
                prop_assert!((a.get(i, j) - b.get(i, j)).abs() <= 1e-12);
                prop_assert!((a.get(i, j) - t[j]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn entropy_derivative_identity(z in logits(), mask in any::<u32>(), alpha in 0.05f64..10.0) {
        let s = subset_of(z.len(), mask);
        let r = entropy_alpha_report(&z, &s, alpha, 1e-5).unwrap();
        prop_assert!((r.analytic_derivative + alpha * r.variance).abs() == 0.0);
        prop_assert!(r.abs_gap < 1e-5, "{r:?}");
    }

    #[test]
    fn entropy_nonincreasing(z in logits(), mask in any::<u32>(), a1 in 0.01f64..10.0, da in 0.0f64..5.0) {
        let s = subset_of(z.len(), mask);
        let h1 = restricted_entropy(&z, &s, a1).unwrap();
        let h2 = restricted_entropy(&z, &s, a1 + da).unwrap();
        prop_assert!(h2 <= h1 + 1e-12);
    }

    #[test]
    fn restricted_softmax_is_renormalised_softmax(z in logits(), mask in any::<u32>(), alpha in 0.1f64..5.0) {
        let s = subset_of(z.len(), mask);
        let full = tempered_softmax(&z, alpha).unwrap();
        let total: f64 = s.iter().map(|&j| full[j]).sum();
        for (x, &j) in restricted_softmax(&z, &s, alpha).unwrap().iter().zip(&s) {
            prop_assert!((x - full[j] / total).abs() <= 1e-12);
        }
    }

    #[test]
    fn hessian_psd_with_constant_kernel(z in logits(), alpha in 0.1f64..10.0) {
        let h = attention_hessian(&z, alpha).unwrap();
        let eig = symmetric_eigen(&h).unwrap();
        prop_assert!(eig.values.iter().all(|&l| l >= -1e-10));
        for i in 0..h.rows() {
            prop_assert!(h.row(i).iter().sum::<f64>().abs() <= 1e-12 * alpha * alpha);
        }
    }

    #[test]
    fn curvature_bounds_hold(z in logits(), alpha in 0.05f64..40.0) {
        let r = curvature_report(&z, alpha).unwrap();
        prop_assert!(!r.violations.any(), "{r:?}");
    }

    #[test]
    fn lipschitz_bound_holds(
        z in prop::collection::vec(-5.0f64..5.0, 3),
        v in prop::collection::vec(-3.0f64..3.0, 6),
        a1 in 0.5f64..3.0,
        a2 in 0.5f64..3.0,
    ) {
        let v = Matrix::new(3, 2, v).unwrap();
        let r = lipschitz_report(&z, &v, a1, a2).unwrap();
        prop_assert!(r.holds && r.margin >= -1e-15, "{r:?}");
    }
}

#[test]
fn entropy_hand_values() {
    let z = [2.0f64, 1.0, 0.0];
    let all = [0, 1, 2];
    assert!((restricted_entropy(&z, &all, 1.0).unwrap() - 0.832395).abs() < 1e-5);
    assert!((restricted_entropy(&z, &all, 2.0).unwrap() - 0.441056).abs() < 1e-5);
    let r = entropy_alpha_report(&z, &all, 1.0, 1e-5).unwrap();
    assert!((r.variance - 0.424405).abs() < 1e-5);
    assert!((entropy(&[0.4f64, 0.6]).unwrap() - 0.673012).abs() < 1e-6);
    let c3 = curvature_report(&z, 3.0).unwrap();
    assert!((c3.tail_mass - 0.0496698).abs() < 1e-6 && (c3.tail_bound.unwrap() - 0.099574).abs() < 1e-6);
    let l = lipschitz_report(&[1.0f64, 0.0], &Matrix::identity(2), 1.0, 2.0).unwrap();
    assert!((l.output_change - 0.211762).abs() < 1e-6 && l.bound == 0.5);
}
