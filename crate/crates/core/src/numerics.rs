//! Special functions, bracketing root finders and the closed-form channel
//! expectations of truncated water-filling under Rayleigh fading.
//!
//! Throughout, the channel power gain `g = |h|²` is `Exp(1)` and a water level
//! `w` together with an availability cap `c = e/τ` yields the power
//! `p = min{(w − 1/g)⁺, c}`. The two expectations over `g` are
//!
//! ```text
//! F(w, c) = E[ln(1 + p g)]      expected rate (nats/s/Hz)
//! G(w, c) = E[p]                expected power (W)
//! ```
//!
//! Both have closed forms in terms of the exponential integral `E₁`.

use thiserror::Error;

/// Euler–Mascheroni constant.
pub const EULER_GAMMA: f64 = 0.577_215_664_901_532_86;

/// Default absolute tolerance for bracketing solves.
pub const DEFAULT_ROOT_TOL: f64 = 1e-10;

const MAX_ROOT_ITER: usize = 500;
// exp(-x) underflows to zero past this point.
const EXP_UNDERFLOW: f64 = 745.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{what}: argument {value} outside domain {domain}")]
    Domain {
        what: &'static str,
        value: f64,
        domain: &'static str,
    },
    #[error("no sign change on [{lo}, {hi}] (f(lo) = {f_lo}, f(hi) = {f_hi})")]
    Bracket { lo: f64, hi: f64, f_lo: f64, f_hi: f64 },
    #[error("root search did not converge after {iterations} iterations (bracket [{lo}, {hi}])")]
    NoConvergence { iterations: usize, lo: f64, hi: f64 },
    #[error("{0}")]
    Infeasible(#[from] Infeasibility),
}

/// Parameter combinations for which no steady operating point exists.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Infeasibility {
    #[error(
        "mean arrival rate {lambda_bar} is not below exp(1/x)E1(1/x) = {bound} \
         (x = {x} solves x exp(-1/x) - E1(1/x) = mean energy rate)"
    )]
    RateAboveBound { lambda_bar: f64, bound: f64, x: f64 },
    #[error(
        "mean arrival rate {lambda_bar} exceeds the water-filling capacity E1(1/x) = {capacity}; \
         the steady-state equations F = rate, G = energy rate have no solution"
    )]
    NoFixedPoint { lambda_bar: f64, capacity: f64 },
    #[error("threshold energy for arrival rate {lambda_bar} lies outside the representable range")]
    ThresholdOutOfRange { lambda_bar: f64 },
}

fn check_positive(what: &'static str, x: f64) -> Result<(), NumericsError> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(NumericsError::Domain {
            what,
            value: x,
            domain: "(0, inf)",
        })
    }
}

/// Series part `Σ_{k≥1} (−1)^{k+1} x^k / (k·k!)` of `E₁`.
fn e1_series_tail(x: f64) -> f64 {
    let mut term = x;
    let mut sum = x;
    for k in 2..200 {
        let kf = k as f64;
        term *= -x / kf;
        let add = term / kf;
        sum += add;
        if add.abs() <= 1e-17 * sum.abs() {
            break;
        }
    }
    sum
}

/// Modified Lentz evaluation of the continued fraction for `eˣE₁(x)`, `x ≥ 1`.
fn e1_scaled_cf(x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut b = x + 1.0;
    let mut c = 1.0 / TINY;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..500 {
        let an = -((i * i) as f64);
        b += 2.0;
        d = 1.0 / (an * d + b);
        c = b + an / c;
        let del = c * d;
        h *= del;
        if (del - 1.0).abs() < 1e-16 {
            break;
        }
    }
    h
}

/// `E₁(x)` for `x > 0` without argument validation.
pub(crate) fn e1_raw(x: f64) -> f64 {
    if x < 1.0 {
        -EULER_GAMMA - x.ln() + e1_series_tail(x)
    } else if x >= EXP_UNDERFLOW {
        0.0
    } else {
        e1_scaled_cf(x) * (-x).exp()
    }
}

/// `eˣE₁(x)` for `x > 0`; finite for every positive argument.
pub(crate) fn e1_scaled_raw(x: f64) -> f64 {
    if x < 1.0 {
        x.exp() * e1_raw(x)
    } else {
        e1_scaled_cf(x)
    }
}

/// `E₁(a) − E₁(b)` for `0 < a ≤ b`, accurate when both arguments are small.
pub(crate) fn e1_diff(a: f64, b: f64) -> f64 {
    if b < 1.0 {
        (b / a).ln() + e1_series_tail(a) - e1_series_tail(b)
    } else {
        e1_raw(a) - e1_raw(b)
    }
}

/// Exponential integral `E₁(x) = ∫₁^∞ e^{−tx}/t dt`.
pub fn exp_integral_e1(x: f64) -> Result<f64, NumericsError> {
    check_positive("E1", x)?;
    Ok(e1_raw(x))
}

/// Scaled exponential integral `eˣE₁(x)`. This is also the ergodic rate
/// `E[ln(1 + P g)]` of constant power `P = 1/x` over Rayleigh fading.
pub fn exp_integral_e1_scaled(x: f64) -> Result<f64, NumericsError> {
    check_positive("scaled E1", x)?;
    Ok(e1_scaled_raw(x))
}

/// Brent's method on a sign-changing bracket.
///
/// Returns `r` with `|f(r)| ≤ tol` or with the final bracket narrower than
/// `tol`. Interpolation steps fall back to bisection whenever they fail to
/// shrink the bracket fast enough, so the iteration is deterministic and
/// always converges on a continuous `f`.
pub fn solve_root_1d<F>(f: F, lo: f64, hi: f64, tol: f64) -> Result<f64, NumericsError>
where
    F: Fn(f64) -> f64,
{
    if !(lo.is_finite() && hi.is_finite() && lo <= hi) || tol.is_nan() || tol <= 0.0 {
        return Err(NumericsError::Domain {
            what: "root bracket",
            value: hi - lo,
            domain: "finite lo <= hi with tol > 0",
        });
    }
    let (mut a, mut b) = (lo, hi);
    let (mut fa, mut fb) = (f(a), f(b));
    if fa == 0.0 {
        return Ok(a);
    }
    if fb == 0.0 {
        return Ok(b);
    }
    if fa.is_nan() || fb.is_nan() || fa.signum() == fb.signum() {
        return Err(NumericsError::Bracket {
            lo,
            hi,
            f_lo: fa,
            f_hi: fb,
        });
    }
    let (mut c, mut fc) = (a, fa);
    let mut d = b - a;
    let mut e = d;
    for _ in 0..MAX_ROOT_ITER {
        if fb.signum() == fc.signum() {
            c = a;
            fc = fa;
            d = b - a;
            e = d;
        }
        if fc.abs() < fb.abs() {
            a = b;
            b = c;
            c = a;
            fa = fb;
            fb = fc;
            fc = fa;
        }
        let tol1 = 2.0 * f64::EPSILON * b.abs() + 0.5 * tol;
        let xm = 0.5 * (c - b);
        if fb.abs() <= tol || xm.abs() <= tol1 || fb == 0.0 {
            return Ok(b);
        }
        if e.abs() >= tol1 && fa.abs() > fb.abs() {
            let s = fb / fa;
            let (mut p, mut q);
            if a == c {
                p = 2.0 * xm * s;
                q = 1.0 - s;
            } else {
                let qq = fa / fc;
                let r = fb / fc;
                p = s * (2.0 * xm * qq * (qq - r) - (b - a) * (r - 1.0));
                q = (qq - 1.0) * (r - 1.0) * (s - 1.0);
            }
            if p > 0.0 {
                q = -q;
            }
            p = p.abs();
            let min1 = 3.0 * xm * q - (tol1 * q).abs();
            let min2 = (e * q).abs();
            if 2.0 * p < min1.min(min2) {
                e = d;
                d = p / q;
            } else {
                d = xm;
                e = d;
            }
        } else {
            d = xm;
            e = d;
        }
        a = b;
        fa = fb;
        b += if d.abs() > tol1 { d } else { tol1.copysign(xm) };
        fb = f(b);
    }
    Err(NumericsError::NoConvergence {
        iterations: MAX_ROOT_ITER,
        lo: b.min(c),
        hi: b.max(c),
    })
}

/// Expected power of untruncated water-filling at level `w`:
/// `w e^{−1/w} − E₁(1/w)`.
fn unclipped_power(w: f64) -> f64 {
    if w <= 0.0 {
        return 0.0;
    }
    let inv = 1.0 / w;
    if inv >= EXP_UNDERFLOW {
        return 0.0;
    }
    w * (-inv).exp() - e1_raw(inv)
}

/// Water level `x` at which untruncated water-filling spends `alpha_bar` on
/// average, i.e. the root of `x e^{−1/x} − E₁(1/x) = ᾱ`.
pub fn solve_x_of_alpha(alpha_bar: f64) -> Result<f64, NumericsError> {
    check_positive("mean energy arrival rate", alpha_bar)?;
    let f = |x: f64| unclipped_power(x) - alpha_bar;
    // unclipped_power(x) < x, so the root lies above alpha_bar.
    let lo = alpha_bar;
    let mut hi = 2.0 * alpha_bar + 2.0;
    while f(hi) <= 0.0 {
        hi *= 2.0;
        if !hi.is_finite() {
            return Err(NumericsError::Bracket {
                lo,
                hi,
                f_lo: f(lo),
                f_hi: f64::NAN,
            });
        }
    }
    solve_root_1d(f, lo, hi, 1e-13)
}

/// Energy threshold `e^th` solving `E₁(τ/e^th) = λ̄`.
///
/// Solved in `y = τ/e` so the result scales exactly with `τ`.
pub fn solve_e_threshold(lambda_bar: f64, tau: f64) -> Result<f64, NumericsError> {
    check_positive("mean data arrival rate", lambda_bar)?;
    check_positive("slot length", tau)?;
    // E1(y) > -γ - ln y for y < 4, so this end always sits above the root.
    let y_lo = 0.5 * (-EULER_GAMMA - lambda_bar).exp();
    if y_lo <= f64::MIN_POSITIVE {
        return Err(Infeasibility::ThresholdOutOfRange { lambda_bar }.into());
    }
    let f = |y: f64| e1_raw(y) - lambda_bar;
    let mut y_hi = 1.0_f64.max(2.0 * y_lo);
    while f(y_hi) > 0.0 {
        y_hi *= 2.0;
    }
    let y = solve_root_1d(f, y_lo, y_hi, 1e-15)?;
    let e_th = tau / y;
    if !e_th.is_finite() {
        return Err(Infeasibility::ThresholdOutOfRange { lambda_bar }.into());
    }
    Ok(e_th)
}

/// Expected rate and power of truncated water-filling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpectationPair {
    pub expected_rate: f64,
    pub expected_power: f64,
}

fn check_expectation_args(w: f64, c: f64) -> Result<(), NumericsError> {
    if w.is_nan() || w < 0.0 {
        return Err(NumericsError::Domain {
            what: "water level",
            value: w,
            domain: "[0, inf]",
        });
    }
    if !(c >= 0.0 && c.is_finite()) {
        return Err(NumericsError::Domain {
            what: "availability cap e/tau",
            value: c,
            domain: "[0, inf)",
        });
    }
    Ok(())
}

/// `F` and `G` without validation. `w` may be `+∞`.
pub(crate) fn expectations_raw(w: f64, c: f64) -> ExpectationPair {
    const ZERO: ExpectationPair = ExpectationPair {
        expected_rate: 0.0,
        expected_power: 0.0,
    };
    if w == 0.0 || c == 0.0 {
        return ZERO;
    }
    if w.is_infinite() {
        // Always at the cap: constant power c.
        return ExpectationPair {
            expected_rate: e1_scaled_raw(1.0 / c),
            expected_power: c,
        };
    }
    let inv_w = 1.0 / w;
    if inv_w >= EXP_UNDERFLOW {
        return ZERO;
    }
    let g_clip = if w > c { 1.0 / (w - c) } else { f64::INFINITY };
    if g_clip >= EXP_UNDERFLOW {
        // Cap never (numerically) binds.
        return ExpectationPair {
            expected_rate: e1_raw(inv_w),
            expected_power: unclipped_power(w),
        };
    }
    let tail = (-g_clip).exp();
    let diff = e1_diff(inv_w, g_clip);
    let expected_rate = diff + tail * e1_scaled_raw(g_clip + 1.0 / c);
    // w e^{-1/w} - (w - c) e^{-g} rewritten to avoid cancellation at large w.
    let gap = c / (w * (w - c));
    let expected_power = c * tail + w * tail * gap.exp_m1() - diff;
    ExpectationPair {
        expected_rate,
        expected_power: expected_power.clamp(0.0, c),
    }
}

/// `F(w, e/τ)`: expected rate of `p = min{(w − 1/g)⁺, e/τ}`.
pub fn expected_rate(water_level: f64, e_over_tau: f64) -> Result<f64, NumericsError> {
    check_expectation_args(water_level, e_over_tau)?;
    Ok(expectations_raw(water_level, e_over_tau).expected_rate)
}

/// `G(w, e/τ)`: expected power of `p = min{(w − 1/g)⁺, e/τ}`.
pub fn expected_power(water_level: f64, e_over_tau: f64) -> Result<f64, NumericsError> {
    check_expectation_args(water_level, e_over_tau)?;
    Ok(expectations_raw(water_level, e_over_tau).expected_power)
}

/// Both expectations in one evaluation.
pub fn expectations(water_level: f64, e_over_tau: f64) -> Result<ExpectationPair, NumericsError> {
    check_expectation_args(water_level, e_over_tau)?;
    Ok(expectations_raw(water_level, e_over_tau))
}

/// How the steady operating point was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SteadyStateKind {
    /// Spending everything keeps up with arrivals; `e* = ᾱτ`, level unbounded.
    Saturated,
    /// Interior solution of `F(w, e/τ) = λ̄`, `G(w, e/τ) = ᾱ`.
    FixedPoint,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SteadyState {
    /// Steady water level (W); `+∞` for [`SteadyStateKind::Saturated`].
    pub water_level: f64,
    /// Steady energy level `e*` (J).
    pub e_star: f64,
    pub kind: SteadyStateKind,
}

/// Rate bounds that delimit the operating regimes for a mean energy rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateBounds {
    /// `x` solving `x e^{−1/x} − E₁(1/x) = ᾱ`.
    pub x: f64,
    /// `E₁(1/ᾱ)`.
    pub lower: f64,
    /// `exp(1/x)E₁(1/x)`.
    pub upper: f64,
}

impl RateBounds {
    pub fn for_alpha(alpha_bar: f64) -> Result<Self, NumericsError> {
        let x = solve_x_of_alpha(alpha_bar)?;
        Ok(Self {
            x,
            lower: e1_raw(1.0 / alpha_bar),
            upper: e1_scaled_raw(1.0 / x),
        })
    }
}

/// Water level `w` with `G(w, c) = ᾱ` for a cap `c > ᾱ`.
fn level_for_power(alpha_bar: f64, c: f64, x: f64) -> Result<f64, NumericsError> {
    let f = |w: f64| expectations_raw(w, c).expected_power - alpha_bar;
    let lo = alpha_bar;
    let mut hi = 2.0 * x.max(c);
    while f(hi) <= 0.0 {
        hi *= 2.0;
        if !hi.is_finite() {
            return Err(NumericsError::Bracket {
                lo,
                hi,
                f_lo: f(lo),
                f_hi: f64::NAN,
            });
        }
    }
    solve_root_1d(f, lo, hi, 1e-14)
}

/// Steady operating point `(w_s, e*)` of the fluid queues.
///
/// * `λ̄ ≥ exp(1/x)E₁(1/x)`: infeasible.
/// * `λ̄ ≤ E₁(1/ᾱ)`: `e* = ᾱτ` directly.
/// * otherwise the pair `F(w, e/τ) = λ̄`, `G(w, e/τ) = ᾱ` is solved by nested
///   bisection: the outer search runs over `c = e/τ ∈ (ᾱ, x)`, the inner one
///   over `w` using monotonicity of `G` in `w`.
///
/// Along that curve `F` only spans `[exp(1/ᾱ)E₁(1/ᾱ), E₁(1/x)]`. Rates below
/// the span keep the saturated point `e* = ᾱτ`; rates above it (but under
/// the feasibility bound) are reported as [`Infeasibility::NoFixedPoint`].
pub fn solve_steady_state(lambda_bar: f64, alpha_bar: f64, tau: f64) -> Result<SteadyState, NumericsError> {
    check_positive("mean data arrival rate", lambda_bar)?;
    check_positive("mean energy arrival rate", alpha_bar)?;
    check_positive("slot length", tau)?;
    let bounds = RateBounds::for_alpha(alpha_bar)?;
    if lambda_bar >= bounds.upper {
        return Err(Infeasibility::RateAboveBound {
            lambda_bar,
            bound: bounds.upper,
            x: bounds.x,
        }
        .into());
    }
    let saturated = SteadyState {
        water_level: f64::INFINITY,
        e_star: alpha_bar * tau,
        kind: SteadyStateKind::Saturated,
    };
    if lambda_bar <= bounds.lower || lambda_bar <= e1_scaled_raw(1.0 / alpha_bar) {
        return Ok(saturated);
    }
    let capacity = e1_raw(1.0 / bounds.x);
    if lambda_bar >= capacity {
        return Err(Infeasibility::NoFixedPoint { lambda_bar, capacity }.into());
    }
    let x = bounds.x;
    let span = x - alpha_bar;
    let outer = |c: f64| -> f64 {
        match level_for_power(alpha_bar, c, x) {
            Ok(w) => expectations_raw(w, c).expected_rate - lambda_bar,
            Err(_) => f64::NAN,
        }
    };
    let c_lo = alpha_bar + 1e-9 * span;
    let c_hi = x - 1e-12 * x;
    let c = solve_root_1d(outer, c_lo, c_hi, 1e-14)?;
    let w = level_for_power(alpha_bar, c, x)?;
    Ok(SteadyState {
        water_level: w,
        e_star: c * tau,
        kind: SteadyStateKind::FixedPoint,
    })
}
