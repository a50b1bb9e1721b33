//! Per-slot power decisions.
//!
//! Every policy returns `p ≥ 0` with `p·τ ≤ E`. The battery cap is applied
//! as `min(·, E/τ)`, so when it binds the returned power is exactly `E/τ`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mdp::TablePolicy;
use crate::params::{SystemParams, SystemState};
use crate::priority::{PriorityError, PriorityModel};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("greedy slack epsilon = {epsilon} must lie in (0, alpha_bar = {alpha_bar})")]
    Epsilon { epsilon: f64, alpha_bar: f64 },
    #[error("unknown policy `{0}` (expected closed_form | greedy | csi_wf | qwwf | mdp_table | constant)")]
    UnknownPolicy(String),
    #[error("policy mdp_table needs a solved table")]
    MissingTable,
    #[error(transparent)]
    Priority(#[from] PriorityError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    ClosedForm,
    Greedy,
    CsiWf,
    Qwwf,
    MdpTable,
    Constant,
}

impl PolicyKind {
    pub const BASELINE_SET: [PolicyKind; 4] = [
        PolicyKind::ClosedForm,
        PolicyKind::Greedy,
        PolicyKind::CsiWf,
        PolicyKind::Qwwf,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PolicyKind::ClosedForm => "closed_form",
            PolicyKind::Greedy => "greedy",
            PolicyKind::CsiWf => "csi_wf",
            PolicyKind::Qwwf => "qwwf",
            PolicyKind::MdpTable => "mdp_table",
            PolicyKind::Constant => "constant",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PolicyKind {
    type Err = PolicyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "closed_form" => PolicyKind::ClosedForm,
            "greedy" => PolicyKind::Greedy,
            "csi_wf" => PolicyKind::CsiWf,
            "qwwf" => PolicyKind::Qwwf,
            "mdp_table" => PolicyKind::MdpTable,
            "constant" => PolicyKind::Constant,
            other => return Err(PolicyError::UnknownPolicy(other.to_string())),
        })
    }
}

/// Water-filling against gain `h2` with level `level`, capped at `cap`.
#[inline]
pub fn water_fill(level: f64, h2: f64, cap: f64) -> f64 {
    if h2 <= 0.0 || cap <= 0.0 {
        return 0.0;
    }
    if level.is_infinite() {
        return cap;
    }
    (level - 1.0 / h2).max(0.0).min(cap)
}

/// `min{(W − 1/|h|²)⁺, E/τ}` with `W` the closed-form water level at `(Q, E)`.
pub fn power_closed_form(state: &SystemState, model: &PriorityModel) -> f64 {
    let tau = model.params().tau;
    let level = model.eval_unchecked(state.q, state.e).water_level;
    water_fill(level, state.h2, state.e / tau)
}

/// Greedy baseline `min{ᾱ − ε, E/τ}`.
pub fn power_greedy(state: &SystemState, params: &SystemParams, epsilon: f64) -> Result<f64, PolicyError> {
    if !(epsilon > 0.0 && epsilon < params.alpha_bar) {
        return Err(PolicyError::Epsilon {
            epsilon,
            alpha_bar: params.alpha_bar,
        });
    }
    Ok((params.alpha_bar - epsilon).min(state.e / params.tau).max(0.0))
}

/// Multiplier state of the dual-subgradient baselines.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualState {
    pub gamma: f64,
    pub t: u64,
    pub epsilon: f64,
    pub a0: f64,
}

impl DualState {
    /// `γ₀ = 1/ᾱ`, so the initial CSI-only water level equals `ᾱ`.
    pub fn initial(alpha_bar: f64, epsilon: f64, a0: f64) -> Self {
        Self {
            gamma: 1.0 / alpha_bar,
            t: 0,
            epsilon,
            a0,
        }
    }

    fn level(&self, weight: f64) -> f64 {
        if self.gamma == 0.0 {
            if weight > 0.0 {
                f64::INFINITY
            } else {
                0.0
            }
        } else {
            weight / self.gamma
        }
    }
}

/// CSI-only water-filling `min{(1/γ − 1/|h|²)⁺, E/τ}`.
pub fn power_csi_wf(state: &SystemState, tau: f64, dual: &DualState) -> f64 {
    water_fill(dual.level(1.0), state.h2, state.e / tau)
}

/// Queue-weighted water-filling `min{(Q/γ − 1/|h|²)⁺, E/τ}`.
pub fn power_qwwf(state: &SystemState, tau: f64, dual: &DualState) -> f64 {
    water_fill(dual.level(state.q), state.h2, state.e / tau)
}

/// `γ ← [γ + a_t (p − ᾱ + ε)]⁺` with `a_t = a0/(t+1)`.
pub fn update_multiplier(dual: &DualState, p_used: f64, alpha_bar: f64) -> DualState {
    let step = dual.a0 / (dual.t as f64 + 1.0);
    DualState {
        gamma: (dual.gamma + step * (p_used - alpha_bar + dual.epsilon)).max(0.0),
        t: dual.t + 1,
        ..*dual
    }
}

/// Tunables shared by the baselines.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyOptions {
    /// Slack as a fraction of `ᾱ`.
    pub epsilon_frac: f64,
    pub a0: f64,
    /// Power of the `constant` policy (W).
    pub constant_power: f64,
}

impl Default for PolicyOptions {
    fn default() -> Self {
        Self {
            epsilon_frac: 0.05,
            a0: 0.1,
            constant_power: 0.0,
        }
    }
}

/// A policy instance bound to one simulation run.
#[derive(Debug, Clone)]
pub enum Policy {
    ClosedForm(PriorityModel),
    Greedy { params: SystemParams, epsilon: f64 },
    CsiWf { tau: f64, alpha_bar: f64, dual: DualState, training: bool },
    Qwwf { tau: f64, alpha_bar: f64, dual: DualState, training: bool },
    Table(TablePolicy),
    Constant { tau: f64, power: f64 },
}

impl Policy {
    pub fn build(
        kind: PolicyKind,
        params: &SystemParams,
        options: &PolicyOptions,
        table: Option<&TablePolicy>,
    ) -> Result<Self, PolicyError> {
        let epsilon = options.epsilon_frac * params.alpha_bar;
        let dual = DualState::initial(params.alpha_bar, epsilon, options.a0);
        Ok(match kind {
            PolicyKind::ClosedForm => Policy::ClosedForm(PriorityModel::new(params)?),
            PolicyKind::Greedy => {
                if !(epsilon > 0.0 && epsilon < params.alpha_bar) {
                    return Err(PolicyError::Epsilon {
                        epsilon,
                        alpha_bar: params.alpha_bar,
                    });
                }
                Policy::Greedy {
                    params: *params,
                    epsilon,
                }
            }
            PolicyKind::CsiWf => Policy::CsiWf {
                tau: params.tau,
                alpha_bar: params.alpha_bar,
                dual,
                training: true,
            },
            PolicyKind::Qwwf => Policy::Qwwf {
                tau: params.tau,
                alpha_bar: params.alpha_bar,
                dual,
                training: true,
            },
            PolicyKind::MdpTable => Policy::Table(table.ok_or(PolicyError::MissingTable)?.clone()),
            PolicyKind::Constant => Policy::Constant {
                tau: params.tau,
                power: options.constant_power.max(0.0),
            },
        })
    }

    pub fn kind(&self) -> PolicyKind {
        match self {
            Policy::ClosedForm(_) => PolicyKind::ClosedForm,
            Policy::Greedy { .. } => PolicyKind::Greedy,
            Policy::CsiWf { .. } => PolicyKind::CsiWf,
            Policy::Qwwf { .. } => PolicyKind::Qwwf,
            Policy::Table(_) => PolicyKind::MdpTable,
            Policy::Constant { .. } => PolicyKind::Constant,
        }
    }

    pub fn power(&self, state: &SystemState) -> f64 {
        match self {
            Policy::ClosedForm(model) => power_closed_form(state, model),
            Policy::Greedy { params, epsilon } => (params.alpha_bar - epsilon).min(state.e / params.tau).max(0.0),
            Policy::CsiWf { tau, dual, .. } => power_csi_wf(state, *tau, dual),
            Policy::Qwwf { tau, dual, .. } => power_qwwf(state, *tau, dual),
            Policy::Table(t) => t.power(state),
            Policy::Constant { tau, power } => power.min(state.e / tau),
        }
    }

    /// Feed back the power actually used; only the dual baselines learn.
    pub fn observe(&mut self, p_used: f64) {
        match self {
            Policy::CsiWf {
                alpha_bar,
                dual,
                training: true,
                ..
            }
            | Policy::Qwwf {
                alpha_bar,
                dual,
                training: true,
                ..
            } => *dual = update_multiplier(dual, p_used, *alpha_bar),
            _ => {}
        }
    }

    /// Stop learning; subsequent decisions use the current multiplier.
    pub fn freeze(&mut self) {
        if let Policy::CsiWf { training, .. } | Policy::Qwwf { training, .. } = self {
            *training = false;
        }
    }

    pub fn dual(&self) -> Option<&DualState> {
        match self {
            Policy::CsiWf { dual, .. } | Policy::Qwwf { dual, .. } => Some(dual),
            _ => None,
        }
    }
}
