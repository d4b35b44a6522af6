mod common;

use common::*;
use segcodec::metrics::{bd_rate, RdCurve};

#[test]
fn bd_rate_matches_dense_numeric_integration() {
    let gap = bd_rate_vs_dense();
    assert!(gap < 0.1, "worst gap {gap} percentage points");
}

#[test]
fn scaled_rates_give_exact_percentages() {
    let a = RdCurve::new(anchor()).unwrap();
    let scaled = |f: f64| RdCurve::new(anchor().into_iter().map(|(r, d)| (r * f, d)).collect()).unwrap();
    assert!(bd_rate(&a, &a).unwrap().abs() < 1e-9);
    assert!((bd_rate(&scaled(2.0), &a).unwrap() - 100.0).abs() < 1e-6);
    assert!((bd_rate(&scaled(0.9), &a).unwrap() + 10.0).abs() < 1e-6);
}

#[test]
fn swapping_curves_inverts_the_ratio() {
    let t = RdCurve::new(vec![(0.11, 28.9), (0.19, 30.8), (0.33, 32.7), (0.55, 34.9), (0.84, 36.7)]).unwrap();
    let a = RdCurve::new(anchor()).unwrap();
    let (x, y) = (bd_rate(&t, &a).unwrap() / 100.0, bd_rate(&a, &t).unwrap() / 100.0);
    assert!(((1.0 + x) * (1.0 + y) - 1.0).abs() < 1e-9);
}

#[test]
fn disjoint_quality_ranges_are_rejected() {
    let lo = RdCurve::new(vec![(0.1, 20.0), (0.2, 21.0), (0.3, 22.0), (0.4, 23.0)]).unwrap();
    let hi = RdCurve::new(vec![(0.1, 30.0), (0.2, 31.0), (0.3, 32.0), (0.4, 33.0)]).unwrap();
    assert!(bd_rate(&lo, &hi).is_err());
}
