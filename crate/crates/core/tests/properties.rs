use hfupdate::evaluation::rrmse_level;
use hfupdate::hierarchy::build_summing_matrix;
use hfupdate::pruning::{reduce, restore};
use hfupdate::reconciliation::{mapping_matrix, reconcile, set_negative_to_zero, CovarianceEstimate, ReconMethod};
use hfupdate::{build_pruned_system, AggregationScheme, HierarchyVector, ObservedPeriod};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

const SCHEMES: &[&[usize]] = &[&[2, 1], &[4, 1], &[4, 2, 1], &[6, 3, 2, 1], &[12, 3, 1], &[12, 6, 4, 3, 2, 1]];

fn scheme_strategy() -> impl Strategy<Value = AggregationScheme> {
    (0..SCHEMES.len()).prop_map(|i| AggregationScheme::new(SCHEMES[i].to_vec()).unwrap())
}

/// A scheme, a step count `z < m` and bottom values for one period.
fn scheme_z_bottom() -> impl Strategy<Value = (AggregationScheme, usize, Vec<f64>)> {
    scheme_strategy().prop_flat_map(|s| {
        let m = s.m();
        (Just(s), 0..m, prop::collection::vec(-100.0..100.0f64, m))
    })
}

/// Well-conditioned covariance `A A' + I/10` from the entries of `A`.
fn covariance(n: usize, entries: &[f64]) -> CovarianceEstimate {
    let a = DMatrix::from_column_slice(n, n, &entries[..n * n]);
    CovarianceEstimate::from_matrix(&a * a.transpose() + DMatrix::identity(n, n) * 0.1).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn stacking_is_summing_matrix_product((s, _z, bottom) in scheme_z_bottom()) {
        let stacked = HierarchyVector::from_bottom(&s, &bottom, 1).unwrap();
        let product = build_summing_matrix(&s).into_matrix() * DVector::from_column_slice(&bottom);
        prop_assert!(close(stacked.values(), product.as_slice(), 1e-12));
    }

    #[test]
    fn restore_inverts_reduce_on_consistent_vectors((s, z, bottom) in scheme_z_bottom()) {
        let system = build_pruned_system(&s, z).unwrap();
        let observed = ObservedPeriod::new(s.clone(), bottom[..z].to_vec(), 1).unwrap();
        let full = HierarchyVector::from_bottom(&s, &bottom, 1).unwrap();
        let reduced = reduce(&full, &observed, &system).unwrap();
        let back = restore(&reduced, &observed, &system).unwrap();
        prop_assert!(close(back.values(), full.values(), 1e-12));
    }

    #[test]
    fn restored_reconciliation_is_coherent(
        (s, z, bottom) in scheme_z_bottom(),
        noise in prop::collection::vec(-50.0..50.0f64, 64),
        entries in prop::collection::vec(-1.0..1.0f64, 40 * 40),
        method in prop::sample::select(ReconMethod::ALL.to_vec()),
    ) {
        let system = build_pruned_system(&s, z).unwrap();
        let observed = ObservedPeriod::new(s.clone(), bottom[..z].to_vec(), 1).unwrap();
        let base: Vec<f64> = (0..s.node_count()).map(|j| noise[j % noise.len()] * (1 + j) as f64).collect();
        let base = HierarchyVector::new(s.clone(), base, 1).unwrap();
        let reduced = reduce(&base, &observed, &system).unwrap();
        let w = covariance(system.m_z(), &entries);
        let weights = mapping_matrix(method, &system.summing_matrix(), Some(&w), false).unwrap();
        let reconciled = reconcile(&weights, &reduced).unwrap();
        let restored = restore(&reconciled, &observed, &system).unwrap();
        prop_assert!(restored.coherence_error() <= 1e-9);
        prop_assert_eq!(&restored.bottom()[..z], &bottom[..z]);
    }

    #[test]
    fn reconciliation_is_idempotent(
        s in scheme_strategy(),
        values in prop::collection::vec(-100.0..100.0f64, 40),
        entries in prop::collection::vec(-1.0..1.0f64, 40 * 40),
        method in prop::sample::select(ReconMethod::ALL.to_vec()),
    ) {
        let n = s.node_count();
        let sm = build_summing_matrix(&s).into_matrix();
        let w = covariance(n, &entries);
        let weights = mapping_matrix(method, &sm, Some(&w), false).unwrap();
        let once = reconcile(&weights, &values[..n]).unwrap();
        let twice = reconcile(&weights, &once).unwrap();
        prop_assert!(close(&once, &twice, 1e-10));
        let sgs = &sm * weights.g() * &sm;
        prop_assert!((sgs - &sm).amax() <= 1e-8);
    }

    #[test]
    fn coherent_input_is_a_fixed_point(
        (s, _z, bottom) in scheme_z_bottom(),
        entries in prop::collection::vec(-1.0..1.0f64, 40 * 40),
        method in prop::sample::select(ReconMethod::ALL.to_vec()),
    ) {
        let sm = build_summing_matrix(&s).into_matrix();
        let w = covariance(s.node_count(), &entries);
        let weights = mapping_matrix(method, &sm, Some(&w), false).unwrap();
        let coherent = HierarchyVector::from_bottom(&s, &bottom, 1).unwrap();
        let out = reconcile(&weights, coherent.values()).unwrap();
        prop_assert!(close(&out, coherent.values(), 1e-10));
    }

    #[test]
    fn clipping_negatives_keeps_coherence((s, _z, bottom) in scheme_z_bottom()) {
        let v = HierarchyVector::from_bottom(&s, &bottom, 1).unwrap();
        let out = set_negative_to_zero(&v);
        prop_assert!(out.coherence_error() <= 1e-10 * (1.0 + v.values().iter().map(|x| x.abs()).sum::<f64>()));
        prop_assert!(out.bottom().iter().all(|&x| x >= 0.0));
        for (a, b) in out.bottom().iter().zip(v.bottom()) {
            prop_assert!(*a == 0.0 || a == b);
        }
    }

    #[test]
    fn rrmse_is_scale_invariant(
        actual in prop::collection::vec(-10.0..10.0f64, 8),
        fair in prop::collection::vec(-10.0..10.0f64, 8),
        base in prop::collection::vec(-10.0..10.0f64, 8),
        c in 0.01..100.0f64,
    ) {
        let r = rrmse_level(&actual, &fair, &base).unwrap();
        let scale = |v: &[f64]| v.iter().map(|x| x * c).collect::<Vec<_>>();
        let rs = rrmse_level(&scale(&actual), &scale(&fair), &scale(&base)).unwrap();
        prop_assume!(r.denominator > 1e-9);
        prop_assert!((r.value - rs.value).abs() <= 1e-10 * (1.0 + r.value));
    }
}
