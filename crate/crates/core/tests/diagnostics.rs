use cgbc_core::diagnostics::{describe, hazen_quantiles, write_qq_csv, DiagnosticsError};
use proptest::prelude::*;

proptest! {
    #[test]
    fn shape_is_location_scale_invariant(
        s in prop::collection::vec(-5.0f64..5.0, 4..50),
        a in 0.1f64..10.0,
        b in -3.0f64..3.0,
    ) {
        let r = describe(&s).unwrap();
        prop_assume!(r.std > 1e-6);
        let moved: Vec<f64> = s.iter().map(|x| a * x + b).collect();
        let q = describe(&moved).unwrap();
        prop_assert!((q.skewness - r.skewness).abs() < 1e-6);
        prop_assert!((q.excess_kurtosis - r.excess_kurtosis).abs() < 1e-6);
        prop_assert!((q.std - a * r.std).abs() < 1e-9 * (1.0 + q.std));
    }

    #[test]
    fn qq_points_are_sorted_in_both_coordinates(s in prop::collection::vec(-5.0f64..5.0, 4..50)) {
        let r = describe(&s).unwrap();
        prop_assert_eq!(r.qq_points.len(), s.len());
        for w in r.qq_points.windows(2) {
            prop_assert!(w[0].0 < w[1].0 && w[0].1 <= w[1].1);
        }
    }

    #[test]
    fn excess_kurtosis_is_bounded_below(s in prop::collection::vec(-5.0f64..5.0, 4..50)) {
        let r = describe(&s).unwrap();
        prop_assert!(r.excess_kurtosis >= -2.0 - 1e-9);
    }
}

#[test]
fn hazen_positions_are_symmetric() {
    let q = hazen_quantiles(5);
    assert!(q[2].abs() < 1e-12);
    assert!((q[0] + q[4]).abs() < 1e-12);
    assert!((q[4] - 1.2815515655446004).abs() < 1e-9);
}

#[test]
fn a_single_far_point_is_flagged() {
    let mut s = vec![0.0; 30];
    for (i, v) in s.iter_mut().enumerate() {
        *v = (i % 5) as f64 * 0.01;
    }
    s.push(5.0);
    let r = describe(&s).unwrap();
    assert!(r.flags.skewed && r.flags.heavy_tailed);
}

#[test]
fn constant_scores_are_degenerate() {
    let r = describe(&[0.3; 6]).unwrap();
    assert!(r.flags.degenerate);
    assert_eq!((r.skewness, r.excess_kurtosis), (0.0, 0.0));
}

#[test]
fn short_or_nonfinite_inputs_are_errors() {
    assert!(matches!(
        describe(&[1.0, 2.0, 3.0]),
        Err(DiagnosticsError::TooFew(3))
    ));
    assert!(matches!(
        describe(&[1.0, 2.0, f64::NAN, 3.0]),
        Err(DiagnosticsError::NonFinite(2))
    ));
}

#[test]
fn qq_csv_has_one_row_per_point() {
    let r = describe(&[1.0, 2.0, 3.0, 4.0]).unwrap();
    let mut out = Vec::new();
    write_qq_csv(&mut out, &[("a".to_string(), &r)]).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert_eq!(text.lines().count(), 5);
    assert!(text.lines().nth(1).unwrap().starts_with("a,"));
}
