use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use spmoe::projection::{
    brute_force_projection, projection_jacobian, sparsegen_lin, sparsemax, LogitVector, SimplexDistribution,
};
use spmoe::Error;

fn lv(v: &[f64]) -> LogitVector {
    LogitVector::new(v.to_vec()).unwrap()
}

fn max_gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn frozen_sparsemax_values_match_grid_oracle() {
    let z = lv(&[0.9, 0.5, -0.3]);
    let oracle = brute_force_projection(&z, 0.0, 1e-10).unwrap();
    let closed = sparsemax(&z).unwrap();
    assert!(max_gap(oracle.probs(), &[0.7, 0.3, 0.0]) < 1e-6);
    assert!(max_gap(closed.probs(), oracle.probs()) < 1e-6);
    assert_abs_diff_eq!(closed.threshold, 0.2, epsilon = 1e-12);

    let z = lv(&[0.2, 0.1, 0.0]);
    let oracle = brute_force_projection(&z, 0.0, 1e-10).unwrap();
    let expected = [0.2 + 0.7 / 3.0, 0.1 + 0.7 / 3.0, 0.7 / 3.0];
    assert!(max_gap(oracle.probs(), &expected) < 1e-6);
    assert!(max_gap(sparsemax(&z).unwrap().probs(), &expected) < 1e-12);
}

#[test]
fn cli_reference_input_matches_oracle() {
    // z is already on the simplex, so the projection is z itself.
    let z = lv(&[0.5, 0.3, 0.2]);
    let oracle = brute_force_projection(&z, 0.0, 1e-10).unwrap();
    let closed = sparsegen_lin(&z, 0.0).unwrap();
    assert!(max_gap(oracle.probs(), &[0.5, 0.3, 0.2]) < 1e-6);
    assert!(max_gap(closed.probs(), oracle.probs()) < 1e-6);
}

#[test]
fn oracle_rejects_large_k() {
    let z = lv(&[0.0; 6]);
    assert!(matches!(brute_force_projection(&z, 0.0, 1e-6), Err(Error::UnsupportedSize(_))));
    assert!(sparsegen_lin(&z, 0.0).is_ok());
}

#[test]
fn lambda_of_one_or_more_is_rejected() {
    for lambda in [1.0, 1.5, f64::NAN, f64::INFINITY] {
        assert!(sparsegen_lin(&lv(&[0.1, 0.2]), lambda).is_err());
    }
}

fn logits(k: std::ops::RangeInclusive<usize>) -> impl Strategy<Value = Vec<f64>> {
    k.prop_flat_map(|k| prop::collection::vec(-3.0f64..3.0, k))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn output_is_on_the_simplex(z in logits(1..=12), lambda in -2.0f64..0.999) {
        let sol = sparsegen_lin(&LogitVector::new(z).unwrap(), lambda).unwrap();
        let sum: f64 = sol.probs().iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-9);
        prop_assert!(sol.probs().iter().all(|&p| p >= 0.0));
        prop_assert!(!sol.support.is_empty());
        for (i, &p) in sol.probs().iter().enumerate() {
            prop_assert_eq!(p > 0.0, sol.support.contains(&i));
        }
    }

    #[test]
    fn shift_invariance(z in logits(2..=8), shift in -5.0f64..5.0, lambda in -1.0f64..0.9) {
        let a = sparsegen_lin(&LogitVector::new(z.clone()).unwrap(), lambda).unwrap();
        let shifted: Vec<f64> = z.iter().map(|v| v + shift).collect();
        let b = sparsegen_lin(&LogitVector::new(shifted).unwrap(), lambda).unwrap();
        prop_assert!(max_gap(a.probs(), b.probs()) < 1e-9);
    }

    #[test]
    fn order_is_preserved(z in logits(2..=8), lambda in -1.0f64..0.9) {
        let sol = sparsegen_lin(&LogitVector::new(z.clone()).unwrap(), lambda).unwrap();
        for i in 0..z.len() {
            for j in 0..z.len() {
                if z[i] > z[j] {
                    prop_assert!(sol.probs()[i] >= sol.probs()[j]);
                }
            }
        }
    }

    #[test]
    fn larger_lambda_never_grows_support(z in logits(2..=8), a in -1.0f64..0.9, b in -1.0f64..0.9) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let z = LogitVector::new(z).unwrap();
        let dense = sparsegen_lin(&z, lo).unwrap();
        let sparse = sparsegen_lin(&z, hi).unwrap();
        prop_assert!(sparse.support.len() <= dense.support.len());
    }

    #[test]
    fn closed_form_matches_oracle(z in logits(2..=5), lambda in -1.0f64..0.99) {
        let z = LogitVector::new(z).unwrap();
        let closed = sparsegen_lin(&z, lambda).unwrap();
        let oracle = brute_force_projection(&z, lambda, 1e-9).unwrap();
        prop_assert!(max_gap(closed.probs(), oracle.probs()) < 1e-6);
    }

    #[test]
    fn backward_is_jacobian_transpose_product(z in logits(2..=8), lambda in -1.0f64..0.9, seed in any::<u64>()) {
        let sol = sparsegen_lin(&LogitVector::new(z).unwrap(), lambda).unwrap();
        let k = sol.probs().len();
        let g: Vec<f64> = (0..k).map(|i| ((seed.wrapping_add(i as u64) % 97) as f64 - 48.0) / 10.0).collect();
        let jac = projection_jacobian(&sol).unwrap();
        let expected: Vec<f64> = (0..k).map(|j| (0..k).map(|i| jac.matrix()[[i, j]] * g[i]).sum()).collect();
        prop_assert!(max_gap(&sol.backward(&g), &expected) < 1e-9);
    }

    #[test]
    fn jacobian_is_symmetric_with_zero_row_sums(z in logits(2..=8), lambda in -1.0f64..0.9) {
        let sol = sparsegen_lin(&LogitVector::new(z).unwrap(), lambda).unwrap();
        let jac = projection_jacobian(&sol).unwrap();
        let m = jac.matrix();
        for i in 0..m.nrows() {
            prop_assert!(m.row(i).sum().abs() < 1e-12);
            for j in 0..m.ncols() {
                prop_assert!((m[[i, j]] - m[[j, i]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn uniform_is_a_valid_distribution(k in 1usize..20) {
        let u = SimplexDistribution::uniform(k);
        prop_assert!(SimplexDistribution::new(u.probs().to_vec()).is_ok());
    }
}
