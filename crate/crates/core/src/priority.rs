//! Regime classification and closed-form priority functions `V(q, e)`.
//!
//! Below the threshold `e^th` (where `E₁(τ/e^th) = λ̄`) each regime has its
//! own closed form; at or above it `V` no longer depends on `e` and the water
//! level is unbounded, i.e. the policy spends everything it holds.

use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::numerics::{self, NumericsError, RateBounds, EULER_GAMMA};
use crate::params::{ParamError, SystemParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Regime {
    LargeArrivalEnergySufficient,
    SmallArrivalEnergyLimited,
    SmallArrivalEnergySufficient,
    Infeasible,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::LargeArrivalEnergySufficient => "LargeArrivalEnergySufficient",
            Regime::SmallArrivalEnergyLimited => "SmallArrivalEnergyLimited",
            Regime::SmallArrivalEnergySufficient => "SmallArrivalEnergySufficient",
            Regime::Infeasible => "Infeasible",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PriorityError {
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("state (q = {q}, e = {e}) outside q >= 0, 0 <= e <= N_E = {n_e}")]
    StateDomain { q: f64, e: f64, n_e: f64 },
    #[error("no closed-form priority function: parameters are infeasible ({0})")]
    Infeasible(String),
}

/// `V(q, e)`, its gradient and the induced water level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorityEval {
    pub v: f64,
    pub v_q: f64,
    pub v_e: f64,
    /// `−v_q/v_e` clamped below at 0; `+∞` where `v_e = 0`.
    pub water_level: f64,
    pub regime: Regime,
    pub e_th: f64,
}

/// Classify `(λ̄, ᾱ)` into an operating regime.
pub fn classify_regime(params: &SystemParams) -> Regime {
    let Ok(bounds) = RateBounds::for_alpha(params.alpha_bar) else {
        return Regime::Infeasible;
    };
    classify_with_bounds(params, &bounds)
}

fn classify_with_bounds(params: &SystemParams, bounds: &RateBounds) -> Regime {
    let lambda = params.lambda_bar;
    if lambda <= bounds.lower {
        Regime::SmallArrivalEnergySufficient
    } else if lambda < bounds.upper {
        if params.alpha_bar >= params.alpha_th {
            Regime::LargeArrivalEnergySufficient
        } else {
            Regime::SmallArrivalEnergyLimited
        }
    } else {
        Regime::Infeasible
    }
}

/// Precomputed closed form for one parameter set; cheap to evaluate per slot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorityModel {
    params: SystemParams,
    regime: Regime,
    e_th: f64,
    constant: f64,
}

impl PriorityModel {
    pub fn new(params: &SystemParams) -> Result<Self, PriorityError> {
        params.validate()?;
        let bounds = RateBounds::for_alpha(params.alpha_bar)?;
        let regime = classify_with_bounds(params, &bounds);
        if regime == Regime::Infeasible {
            let reason = numerics::Infeasibility::RateAboveBound {
                lambda_bar: params.lambda_bar,
                bound: bounds.upper,
                x: bounds.x,
            };
            return Err(PriorityError::Infeasible(reason.to_string()));
        }
        let (lambda, alpha, tau) = (params.lambda_bar, params.alpha_bar, params.tau);
        let e_th = if lambda > 0.0 {
            numerics::solve_e_threshold(lambda, tau)?
        } else {
            0.0
        };
        let constant = match regime {
            Regime::LargeArrivalEnergySufficient => {
                tau / (4.0 * lambda) * (1.0 + 2.0 * EULER_GAMMA + 2.0 * lambda - 2.0 * alpha.ln())
            }
            Regime::SmallArrivalEnergyLimited => tau / 2.0 - alpha * tau / (3.0 * lambda),
            _ => 0.0,
        };
        Ok(Self {
            params: *params,
            regime,
            e_th,
            constant,
        })
    }

    pub fn regime(&self) -> Regime {
        self.regime
    }

    pub fn e_threshold(&self) -> f64 {
        self.e_th
    }

    pub fn params(&self) -> &SystemParams {
        &self.params
    }

    /// Evaluate without domain checks; `e` above `e^th` uses the flat branch.
    pub fn eval_unchecked(&self, q: f64, e: f64) -> PriorityEval {
        let p = &self.params;
        let (lambda, tau) = (p.lambda_bar, p.tau);
        let make = |v: f64, v_q: f64, v_e: f64, water_level: f64| PriorityEval {
            v,
            v_q,
            v_e,
            water_level,
            regime: self.regime,
            e_th: self.e_th,
        };
        if lambda == 0.0 {
            return make(0.0, 0.0, 0.0, f64::INFINITY);
        }
        if self.regime == Regime::SmallArrivalEnergySufficient {
            let l2t = lambda * lambda * tau;
            return make(-q * q / (2.0 * l2t), -q / l2t, 0.0, f64::INFINITY);
        }
        let flat = e >= self.e_th;
        let e = e.min(self.e_th);
        let (v, v_q, v_e_raw, level) = match self.regime {
            Regime::LargeArrivalEnergySufficient => self.regime1(q, e),
            Regime::SmallArrivalEnergyLimited => self.regime2(q, e),
            _ => unreachable!("regime fixed at construction"),
        };
        if flat {
            make(v, v_q, 0.0, f64::INFINITY)
        } else {
            make(v, v_q, v_e_raw, level)
        }
    }

    fn regime1(&self, q: f64, e: f64) -> (f64, f64, f64, f64) {
        let p = &self.params;
        let (lambda, alpha, tau) = (p.lambda_bar, p.alpha_bar, p.tau);
        if e == 0.0 {
            return (self.constant, 0.0, -q / (lambda * alpha * tau), 0.0);
        }
        let log_term = EULER_GAMMA + lambda - (e / tau).ln();
        let v = e * e / (4.0 * lambda * alpha * alpha * tau) * (1.0 + 2.0 * log_term)
            - e * q / (lambda * alpha * tau)
            + self.constant;
        let v_q = -e / (lambda * alpha * tau);
        let v_e = e * log_term / (lambda * alpha * alpha * tau) - q / (lambda * alpha * tau);
        let level = clamp_level(alpha * e, e * log_term - alpha * q);
        (v, v_q, v_e, level)
    }

    fn regime2(&self, q: f64, e: f64) -> (f64, f64, f64, f64) {
        let p = &self.params;
        let (lambda, alpha, tau) = (p.lambda_bar, p.alpha_bar, p.tau);
        let a2 = alpha * alpha;
        let v = -e.powi(3) / (3.0 * lambda * a2 * tau * tau) + e * e / (2.0 * a2 * tau)
            - q * e / (lambda * alpha * tau)
            + self.constant;
        let v_q = -e / (lambda * alpha * tau);
        let v_e = -e * e / (lambda * a2 * tau * tau) + e / (a2 * tau) - q / (lambda * alpha * tau);
        let level = if e == 0.0 {
            0.0
        } else {
            clamp_level(alpha * tau * e, -e * e + lambda * tau * e - alpha * tau * q)
        };
        (v, v_q, v_e, level)
    }

    pub fn eval(&self, q: f64, e: f64) -> Result<PriorityEval, PriorityError> {
        self.check_state(q, e)?;
        Ok(self.eval_unchecked(q, e))
    }

    pub fn water_level(&self, q: f64, e: f64) -> Result<f64, PriorityError> {
        Ok(self.eval(q, e)?.water_level)
    }

    fn check_state(&self, q: f64, e: f64) -> Result<(), PriorityError> {
        if q >= 0.0 && q.is_finite() && e >= 0.0 && e <= self.params.n_e {
            Ok(())
        } else {
            Err(PriorityError::StateDomain {
                q,
                e,
                n_e: self.params.n_e,
            })
        }
    }
}

/// `num/den` with a nonpositive ratio reported as 0 and `den = 0` as `+∞`.
fn clamp_level(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        f64::INFINITY
    } else {
        (num / den).max(0.0)
    }
}

pub fn priority_value(q: f64, e: f64, params: &SystemParams) -> Result<PriorityEval, PriorityError> {
    PriorityModel::new(params)?.eval(q, e)
}

pub fn water_level(q: f64, e: f64, params: &SystemParams) -> Result<f64, PriorityError> {
    PriorityModel::new(params)?.water_level(q, e)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConditionResult {
    pub holds: bool,
    pub lhs: f64,
    pub rhs: f64,
    /// Positive when the condition holds with room to spare.
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityReport {
    /// `λ̄ < E[exp(1/α)E₁(1/α)]`.
    pub rate: ConditionResult,
    /// `N_E ≥ N·e*`; absent when no steady energy level exists.
    pub storage: Option<ConditionResult>,
    pub e_star: Option<f64>,
    pub note: Option<String>,
}

impl StabilityReport {
    pub fn all_hold(&self) -> bool {
        self.rate.holds && self.storage.is_some_and(|s| s.holds)
    }
}

/// Evaluate the rate and storage stability conditions for a discrete
/// harvest distribution given as `(α, probability)` pairs.
pub fn stability_check(
    params: &SystemParams,
    alpha_distribution: &[(f64, f64)],
) -> Result<StabilityReport, PriorityError> {
    params.validate()?;
    let mut expected = 0.0;
    for &(alpha, prob) in alpha_distribution {
        if alpha > 0.0 {
            expected += prob * numerics::exp_integral_e1_scaled(1.0 / alpha)?;
        }
    }
    let rate = ConditionResult {
        holds: params.lambda_bar < expected,
        lhs: params.lambda_bar,
        rhs: expected,
        margin: expected - params.lambda_bar,
    };
    let (storage, e_star, note) = if params.lambda_bar == 0.0 {
        let need = 0.0;
        let c = ConditionResult {
            holds: params.n_e >= need,
            lhs: params.n_e,
            rhs: need,
            margin: params.n_e - need,
        };
        (Some(c), Some(0.0), None)
    } else {
        match numerics::solve_steady_state(params.lambda_bar, params.alpha_bar, params.tau) {
            Ok(s) => {
                let need = params.block_len as f64 * s.e_star;
                let c = ConditionResult {
                    holds: params.n_e >= need,
                    lhs: params.n_e,
                    rhs: need,
                    margin: params.n_e - need,
                };
                (Some(c), Some(s.e_star), None)
            }
            Err(NumericsError::Infeasible(why)) => (None, None, Some(why.to_string())),
            Err(other) => return Err(other.into()),
        }
    };
    Ok(StabilityReport {
        rate,
        storage,
        e_star,
        note,
    })
}
