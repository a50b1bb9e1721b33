//! Special functions and channel expectations against frozen references and
//! an independent quadrature of the truncated water-filling integrals.

use ehopt_core::numerics::{
    exp_integral_e1, exp_integral_e1_scaled, expected_power, expected_rate, solve_e_threshold, solve_steady_state,
    solve_x_of_alpha, RateBounds, SteadyStateKind,
};
use proptest::prelude::*;

// 30-digit values from an arbitrary-precision library, rounded to 20.
const E1_REFERENCE: [(f64, f64); 8] = [
    (1e-6, 13.238295893062491289),
    (1e-3, 6.3315393641361493112),
    (0.1, 1.8229239584193906159),
    (0.5, 0.55977359477616081175),
    (1.0, 0.21938393439552027368),
    (2.5, 0.024914917870269735496),
    (10.0, 4.1569689296853242774e-6),
    (40.0, 1.0367732614516569722e-19),
];

#[test]
fn e1_matches_frozen_values() {
    for (x, want) in E1_REFERENCE {
        let got = exp_integral_e1(x).unwrap();
        assert!(((got - want) / want).abs() < 1e-13, "E1({x}) = {got}, want {want}");
    }
    assert!(exp_integral_e1(-1.0).is_err());
}

fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, n: usize) -> f64 {
    let n = n + n % 2;
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for k in 1..n {
        s += f(a + k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

/// `(E[R], E[p])` for `p = min{(w − 1/g)⁺, c}`, `g ~ Exp(1)`, by composite
/// Simpson on the pieces where `p` is smooth. Integrands in the unclipped piece
/// are written in `u = ln g` to tame the log at the left end.
fn quadrature(w: f64, c: f64) -> (f64, f64) {
    let lo = 1.0 / w;
    let clip = if w > c { 1.0 / (w - c) } else { f64::INFINITY };
    let top = clip.min(lo + 60.0);
    let free_rate = |u: f64| {
        let g = u.exp();
        (w * g).ln() * (-g).exp() * g
    };
    let free_power = |u: f64| {
        let g = u.exp();
        (w - 1.0 / g) * (-g).exp() * g
    };
    let (mut rate, mut power) = (
        simpson(free_rate, lo.ln(), top.ln(), 40_000),
        simpson(free_power, lo.ln(), top.ln(), 40_000),
    );
    if clip.is_finite() {
        let tail = (-clip).exp();
        rate += simpson(|g| (1.0 + c * g).ln() * (-g).exp(), clip, clip + 60.0, 40_000);
        power += c * tail;
    }
    (rate, power)
}

#[test]
fn expectations_match_quadrature() {
    for &w in &[0.05, 0.3, 1.0, 2.0, 5.0, 20.0, 120.0] {
        for &c in &[0.1, 0.8, 3.0, 10.0, 50.0] {
            let (rq, pq) = quadrature(w, c);
            let f = expected_rate(w, c).unwrap();
            let g = expected_power(w, c).unwrap();
            assert!((f - rq).abs() < 1e-8 * (1.0 + rq), "F({w}, {c}) = {f}, quadrature {rq}");
            assert!((g - pq).abs() < 1e-8 * (1.0 + pq), "G({w}, {c}) = {g}, quadrature {pq}");
        }
    }
}

#[test]
fn unclipped_rate_example() {
    let f = expected_rate(2.0, 10.0).unwrap();
    assert!((f - 0.5597735948).abs() < 1e-10);
    let clipped = expected_rate(20.0, 5.0).unwrap();
    let (lo, hi) = (exp_integral_e1(0.2).unwrap(), exp_integral_e1_scaled(0.2).unwrap());
    assert!(lo < clipped && clipped < hi);
    assert_eq!(expected_power(0.0, 3.0).unwrap(), 0.0);
    assert!(expected_rate(1e-9, 3.0).unwrap() < 1e-12);
    assert!((expected_power(1e12, 3.0).unwrap() - 3.0).abs() < 1e-6);
    assert!(expected_rate(-1.0, 1.0).is_err());
    assert!(expected_power(1.0, -1.0).is_err());
}

#[test]
fn e_threshold_examples() {
    let hi = solve_e_threshold(1.8, 0.1).unwrap();
    let lo = solve_e_threshold(0.3, 0.1).unwrap();
    assert!(lo < hi);
    for (lambda, e) in [(1.8, hi), (0.3, lo)] {
        assert!((exp_integral_e1(0.1 / e).unwrap() - lambda).abs() < 1e-9);
    }
    let scaled = solve_e_threshold(1.8, 0.3).unwrap();
    assert!((scaled / hi - 3.0).abs() < 1e-8);
}

#[test]
fn steady_state_cases() {
    let tau = 0.1;
    let b = RateBounds::for_alpha(10.0).unwrap();
    let low = solve_steady_state(0.5 * b.lower, 10.0, tau).unwrap();
    assert_eq!(low.e_star, 10.0 * tau);
    assert_eq!(low.kind, SteadyStateKind::Saturated);

    let mid = 0.5 * (b.lower + b.upper);
    let s = solve_steady_state(mid, 10.0, tau).unwrap();
    assert_eq!(s.kind, SteadyStateKind::FixedPoint);
    let c = s.e_star / tau;
    assert!((expected_rate(s.water_level, c).unwrap() - mid).abs() <= 1e-7);
    assert!((expected_power(s.water_level, c).unwrap() - 10.0).abs() <= 1e-7);
    assert!(s.e_star > 10.0 * tau && s.e_star < b.x * tau);

    assert!(solve_steady_state(b.upper * 1.01, 10.0, tau).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn e1_strictly_decreasing(x in 1e-6f64..50.0, bump in 1e-3f64..1.0) {
        prop_assert!(exp_integral_e1(x * (1.0 + bump)).unwrap() < exp_integral_e1(x).unwrap());
    }

    #[test]
    fn f_g_monotone_and_bounded(lw in -2.0f64..3.0, lc in -2.0f64..2.5, step in 1.0f64..3.0) {
        let (w, c) = (10f64.powf(lw), 10f64.powf(lc));
        let (f1, g1) = (expected_rate(w, c).unwrap(), expected_power(w, c).unwrap());
        let (f2, g2) = (expected_rate(w * step, c).unwrap(), expected_power(w * step, c).unwrap());
        prop_assert!(f2 >= f1 - 1e-14 && g2 >= g1 - 1e-14);
        prop_assert!(f1 <= exp_integral_e1_scaled(1.0 / c).unwrap() * (1.0 + 1e-12));
        prop_assert!(g1 >= 0.0 && g1 <= c * (1.0 + 1e-12));
    }

    #[test]
    fn threshold_root_residual(lambda in 0.01f64..4.0, tau in 0.01f64..1.0) {
        let e = solve_e_threshold(lambda, tau).unwrap();
        prop_assert!((exp_integral_e1(tau / e).unwrap() - lambda).abs() <= 1e-9);
    }

    #[test]
    fn x_of_alpha_residual(alpha in 0.05f64..50.0) {
        let x = solve_x_of_alpha(alpha).unwrap();
        let lhs = x * (-1.0 / x).exp() - exp_integral_e1(1.0 / x).unwrap();
        prop_assert!((lhs - alpha).abs() <= 1e-9 * (1.0 + alpha));
        prop_assert!(x > alpha);
    }
}
