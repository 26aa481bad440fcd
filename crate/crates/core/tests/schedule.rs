//! Schedule tests: frozen high-precision reference values plus structural
//! invariants over a range of step counts and offsets.

use procdiff::schedule::{CosineSchedule, BETA_MAX, DEFAULT_STEPS, DEFAULT_TAU};
use proptest::prelude::*;

// Reference values computed independently with 40-digit arithmetic for
// N = 200, tau = 0.008.
const ALPHA_BAR_100: f64 = 0.4938435904406377;
const BETA_1: f64 = 2.5497263637203034e-4;
const BETA_100: f64 = 0.015534553096115906;
const COEF_X0_100: f64 = 0.021737444937558334;
const COEF_XN_100: f64 = 0.9769265482207448;
const STD_100: f64 = 0.12367451570447017;

fn default_schedule() -> CosineSchedule {
    CosineSchedule::new(DEFAULT_STEPS, DEFAULT_TAU).unwrap()
}

#[test]
fn midpoint_signal_level_matches_reference() {
    let s = default_schedule();
    assert!((s.alpha_bar(100) - ALPHA_BAR_100).abs() < 1e-12, "got {}", s.alpha_bar(100));
    assert!((s.alpha_bar_unclipped(100) - ALPHA_BAR_100).abs() < 1e-12);
}

#[test]
fn first_step_variance_matches_reference() {
    let s = default_schedule();
    assert!((s.beta(1) - BETA_1).abs() < 1e-15, "got {}", s.beta(1));
}

#[test]
fn reverse_coefficients_match_reference_at_midpoint() {
    let s = default_schedule();
    assert!((s.beta(100) - BETA_100).abs() < 1e-12);
    let c = s.reverse_coefficients(100);
    assert!((c.coef_x0 - COEF_X0_100).abs() < 1e-12, "coef_x0 {}", c.coef_x0);
    assert!((c.coef_xn - COEF_XN_100).abs() < 1e-12, "coef_xn {}", c.coef_xn);
    assert!((c.std - STD_100).abs() < 1e-12, "std {}", c.std);
}

#[test]
fn signal_is_gone_by_the_final_step() {
    let s = default_schedule();
    assert!(s.alpha_bar_unclipped(DEFAULT_STEPS) <= 1e-10);
    // only the very last step hits the clip at these settings
    for n in 1..DEFAULT_STEPS {
        assert!(s.beta(n) < BETA_MAX, "beta({}) = {}", n, s.beta(n));
    }
    assert_eq!(s.beta(DEFAULT_STEPS), BETA_MAX);
}

#[test]
fn endpoints_and_validation() {
    let s = default_schedule();
    assert_eq!(s.alpha_bar(0), 1.0);
    assert_eq!(s.n_steps(), DEFAULT_STEPS);
    assert!(CosineSchedule::new(0, DEFAULT_TAU).is_err());
    assert!(CosineSchedule::new(10, 0.0).is_err());
    assert!(CosineSchedule::new(10, -0.5).is_err());
    assert!(CosineSchedule::new(10, f64::NAN).is_err());
}

#[test]
fn first_reverse_step_is_deterministic() {
    for n_steps in [1, 2, 50, 200] {
        let s = CosineSchedule::new(n_steps, DEFAULT_TAU).unwrap();
        let c = s.reverse_coefficients(1);
        assert_eq!(c.std, 0.0, "N = {}", n_steps);
        // with alpha_bar(0) = 1 the mean collapses onto the x0 estimate
        assert!((c.coef_x0 - 1.0).abs() < 1e-9, "N = {}: coef_x0 = {}", n_steps, c.coef_x0);
        assert!(c.coef_xn.abs() < 1e-9, "N = {}: coef_xn = {}", n_steps, c.coef_xn);
    }
}

proptest! {
    #[test]
    fn schedule_invariants_hold_across_settings(
        n_steps in 1usize..=400,
        tau in 1e-3f64..0.05,
    ) {
        let s = CosineSchedule::new(n_steps, tau).unwrap();
        prop_assert_eq!(s.alpha_bar(0), 1.0);
        for n in 1..=n_steps {
            let beta = s.beta(n);
            prop_assert!(beta > 0.0 && beta <= BETA_MAX, "beta({}) = {}", n, beta);
            // strict monotone decay
            prop_assert!(s.alpha_bar(n) < s.alpha_bar(n - 1));
            prop_assert!(s.alpha_bar(n) > 0.0);
            // stored table is consistent with the recurrence
            let recurred = s.alpha_bar(n - 1) * (1.0 - beta);
            prop_assert!((s.alpha_bar(n) - recurred).abs() <= 1e-12);
        }
        prop_assert!(s.alpha_bar_unclipped(n_steps) <= 1e-10);
    }

    #[test]
    fn noise_free_reverse_step_recovers_previous_signal_level(
        n_steps in 2usize..=300,
        tau in 1e-3f64..0.05,
    ) {
        // with x_n = sqrt(alpha_bar(n)) * x0 and a perfect x0 estimate, the
        // posterior mean must sit at sqrt(alpha_bar(n-1)) * x0
        let s = CosineSchedule::new(n_steps, tau).unwrap();
        for n in 1..=n_steps {
            let c = s.reverse_coefficients(n);
            let combined = c.coef_x0 + c.coef_xn * s.alpha_bar(n).sqrt();
            let expected = s.alpha_bar(n - 1).sqrt();
            prop_assert!(
                (combined - expected).abs() <= 1e-10 * expected.max(1.0),
                "n = {}: {} vs {}",
                n,
                combined,
                expected
            );
        }
    }
}
