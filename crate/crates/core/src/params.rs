//! Model constants and per-slot observables.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("invalid parameter `{field}` = {value}: {reason}")]
pub struct ParamError {
    pub field: &'static str,
    pub value: f64,
    pub reason: &'static str,
}

/// Link and harvesting constants.
///
/// Queue contents are measured in mean-packet units, so `lambda_bar` is in
/// packets/s and one packet drains at one nat/s/Hz of rate for one second.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemParams {
    /// Slot length (s).
    pub tau: f64,
    /// Mean data arrival rate (packets/s).
    pub lambda_bar: f64,
    /// Mean harvested power (W).
    pub alpha_bar: f64,
    /// Battery capacity (J).
    #[serde(rename = "N_E")]
    pub n_e: f64,
    /// Slots per energy block.
    #[serde(rename = "N")]
    pub block_len: u64,
    /// Modulation-and-coding gap. The closed forms assume 1.
    pub zeta: f64,
    /// Harvest rate separating the energy-sufficient and energy-limited forms (W).
    pub alpha_th: f64,
}

impl Default for SystemParams {
    fn default() -> Self {
        Self {
            tau: 0.1,
            lambda_bar: 1.8,
            alpha_bar: 10.0,
            n_e: 8640.0,
            block_len: 1,
            zeta: 1.0,
            alpha_th: 3.6,
        }
    }
}

fn err(field: &'static str, value: f64, reason: &'static str) -> ParamError {
    ParamError { field, value, reason }
}

impl SystemParams {
    /// `lambda_bar = 0` is accepted (idle link); everything else must be positive.
    pub fn validate(&self) -> Result<(), ParamError> {
        let positive = [
            ("tau", self.tau),
            ("alpha_bar", self.alpha_bar),
            ("zeta", self.zeta),
            ("alpha_th", self.alpha_th),
        ];
        for (field, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(err(field, v, "must be positive and finite"));
            }
        }
        if !(self.lambda_bar >= 0.0 && self.lambda_bar.is_finite()) {
            return Err(err("lambda_bar", self.lambda_bar, "must be nonnegative and finite"));
        }
        if !(self.n_e >= 0.0 && self.n_e.is_finite()) {
            return Err(err("N_E", self.n_e, "must be nonnegative and finite"));
        }
        if self.block_len == 0 {
            return Err(err("N", 0.0, "block length must be at least 1"));
        }
        Ok(())
    }

    pub fn with_lambda(mut self, lambda_bar: f64) -> Self {
        self.lambda_bar = lambda_bar;
        self
    }

    pub fn with_alpha(mut self, alpha_bar: f64) -> Self {
        self.alpha_bar = alpha_bar;
        self
    }
}

/// Per-slot observables `(|h|², Q, E)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SystemState {
    pub h2: f64,
    pub q: f64,
    pub e: f64,
}

impl SystemState {
    pub fn new(h2: f64, q: f64, e: f64) -> Self {
        Self { h2, q, e }
    }

    pub fn is_valid(&self, params: &SystemParams) -> bool {
        self.h2 >= 0.0 && self.q >= 0.0 && self.e >= 0.0 && self.e <= params.n_e
    }
}

/// Instantaneous rate `ln(1 + ζ p g)` in nats/s/Hz.
#[inline]
pub fn rate(h2: f64, p: f64, zeta: f64) -> f64 {
    (zeta * p * h2).ln_1p()
}
