//! Reflected fluid model of the two queues.
//!
//! Time is measured in slots. With the policy's expected rate `F` and power
//! `G` at the current point,
//!
//! ```text
//! dq = τ(λ̄ − F) dt + dL      L grows only while q = 0
//! de = τ(ᾱ − G) dt − dU      U grows only while e = N_E
//! ```
//!
//! Each explicit Euler step is followed by projection onto
//! `q ≥ 0, e ≤ N_E`; the projected amounts are the increments of `L` and `U`.

use std::io::Write;

use serde::Serialize;
use thiserror::Error;

use crate::numerics;
use crate::params::SystemParams;
use crate::priority::PriorityModel;

#[derive(Debug, Error)]
pub enum VctsError {
    #[error("invalid integration setup: {0}")]
    Config(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Fluid-level power rules.
#[derive(Debug, Clone, PartialEq)]
pub enum FluidPolicy {
    /// Water-filling at the closed-form level `−V_q/V_e`.
    WaterLevel(PriorityModel),
    /// Constant power `min(P, e/τ)` regardless of the channel.
    ConstantPower { power: f64 },
    /// Hysteresis: `power` once `e` exceeds `on_above`, zero once it drops
    /// below `off_below`.
    Threshold {
        power: f64,
        on_above: f64,
        off_below: f64,
        on: bool,
    },
}

impl FluidPolicy {
    pub fn threshold(power: f64, on_above: f64, off_below: f64) -> Self {
        FluidPolicy::Threshold {
            power,
            on_above,
            off_below,
            on: false,
        }
    }

    /// Expected `(rate, power)` at `(q, e)`.
    fn drift(&self, q: f64, e: f64, tau: f64) -> (f64, f64) {
        let cap = e / tau;
        let constant = |p: f64| {
            let p = p.min(cap);
            if p > 0.0 {
                (numerics::e1_scaled_raw(1.0 / p), p)
            } else {
                (0.0, 0.0)
            }
        };
        match self {
            FluidPolicy::WaterLevel(model) => {
                let w = model.eval_unchecked(q, e).water_level;
                let pair = numerics::expectations_raw(w, cap);
                (pair.expected_rate, pair.expected_power)
            }
            FluidPolicy::ConstantPower { power } => constant(*power),
            FluidPolicy::Threshold { power, on, .. } => {
                if *on {
                    constant(*power)
                } else {
                    (0.0, 0.0)
                }
            }
        }
    }

    fn update_mode(&mut self, e: f64) {
        if let FluidPolicy::Threshold {
            on_above,
            off_below,
            on,
            ..
        } = self
        {
            if e > *on_above {
                *on = true;
            } else if e < *off_below {
                *on = false;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VctsTrajectory {
    pub times: Vec<f64>,
    pub q: Vec<f64>,
    pub e: Vec<f64>,
    /// Cumulative lower reflection at `q = 0`.
    pub lower: Vec<f64>,
    /// Cumulative upper reflection at `e = N_E`.
    pub upper: Vec<f64>,
}

impl VctsTrajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// CSV with header `t,q,e,L,U`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), VctsError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["t", "q", "e", "L", "U"])?;
        for i in 0..self.len() {
            w.write_record(&[
                self.times[i].to_string(),
                self.q[i].to_string(),
                self.e[i].to_string(),
                self.lower[i].to_string(),
                self.upper[i].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Integrate from `(q0, e0)` over `[0, horizon]` slots with step `dt` slots.
///
/// `dt ≤ 1` keeps `e ≥ 0` because no rule spends faster than `e/τ`.
pub fn integrate_vcts(
    params: &SystemParams,
    policy: &FluidPolicy,
    q0: f64,
    e0: f64,
    horizon: f64,
    dt: f64,
) -> Result<VctsTrajectory, VctsError> {
    params.validate().map_err(|e| VctsError::Config(e.to_string()))?;
    if !(dt > 0.0 && dt <= 1.0) {
        return Err(VctsError::Config(format!("step {dt} must lie in (0, 1] slot")));
    }
    if !(horizon.is_finite() && dt < horizon) {
        return Err(VctsError::Config(format!("step {dt} must be below the horizon {horizon}")));
    }
    if !(q0 >= 0.0 && e0 >= 0.0 && e0 <= params.n_e) {
        return Err(VctsError::Config(format!(
            "initial point (q = {q0}, e = {e0}) outside q >= 0, 0 <= e <= N_E"
        )));
    }
    let (tau, lambda, alpha, cap) = (params.tau, params.lambda_bar, params.alpha_bar, params.n_e);
    let steps = (horizon / dt).ceil() as usize;
    let mut traj = VctsTrajectory {
        times: Vec::with_capacity(steps + 1),
        q: Vec::with_capacity(steps + 1),
        e: Vec::with_capacity(steps + 1),
        lower: Vec::with_capacity(steps + 1),
        upper: Vec::with_capacity(steps + 1),
    };
    let mut policy = policy.clone();
    let (mut t, mut q, mut e, mut l, mut u) = (0.0, q0, e0, 0.0, 0.0);
    policy.update_mode(e);
    let push = |traj: &mut VctsTrajectory, t, q, e, l, u| {
        traj.times.push(t);
        traj.q.push(q);
        traj.e.push(e);
        traj.lower.push(l);
        traj.upper.push(u);
    };
    push(&mut traj, t, q, e, l, u);
    for k in 0..steps {
        let h = if k + 1 == steps { horizon - t } else { dt };
        let (rate, power) = policy.drift(q, e, tau);
        let q_tent = q + h * tau * (lambda - rate);
        let e_tent = e + h * tau * (alpha - power);
        if q_tent < 0.0 {
            l += -q_tent;
            q = 0.0;
        } else {
            q = q_tent;
        }
        if e_tent > cap {
            u += e_tent - cap;
            e = cap;
        } else {
            e = e_tent.max(0.0);
        }
        t = if k + 1 == steps { horizon } else { t + h };
        policy.update_mode(e);
        push(&mut traj, t, q, e, l, u);
    }
    Ok(traj)
}

/// Trapezoidal `∫ q dt` over the trajectory.
pub fn total_cost(trajectory: &VctsTrajectory) -> f64 {
    trajectory
        .times
        .windows(2)
        .zip(trajectory.q.windows(2))
        .map(|(t, q)| 0.5 * (t[1] - t[0]) * (q[0] + q[1]))
        .sum()
}
