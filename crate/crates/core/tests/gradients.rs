//! End-to-end derivative audits: every primitive against central
//! differences, one analytic second derivative, and full-episode
//! hypergradients across the critic feature settings.

use sca_core::check::{hypergradient_suite, primitive_suite, second_derivative_check};

#[test]
fn primitives_match_finite_differences() {
    let reports = primitive_suite(0xC0FFEE).unwrap();
    assert!(reports.len() > 20);
    for r in &reports {
        assert!(
            r.passed(),
            "{}: max rel err {} over tolerance {}",
            r.name,
            r.max_rel_err,
            r.tolerance
        );
    }
}

#[test]
fn nested_differentiation_is_exact_on_a_cubic() {
    let r = second_derivative_check().unwrap();
    assert!(r.passed(), "{}: {}", r.name, r.max_rel_err);
}

#[test]
fn episode_hypergradients_match_finite_differences() {
    // eight instances walk the critic flag cycle and include one
    // learned-rate configuration
    let reports = hypergradient_suite(0xFEED, 8).unwrap();
    assert_eq!(reports.len(), 8);
    for r in &reports {
        assert!(
            r.passed(),
            "{}: max rel err {} over tolerance {}",
            r.name,
            r.max_rel_err,
            r.tolerance
        );
    }
}
