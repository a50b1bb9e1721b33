//! Experiment configuration: sectioned TOML merged over built-in defaults.
//!
//! ```toml
//! name = "fig7"
//! [system]   # tau, lambda_bar, alpha_bar, N_E, N, zeta, alpha_th
//! [sim]      # horizon, warmup_frac, seed, n_seeds, policies, ...
//! [energy]   # kind = "poisson" | "deterministic", quantum
//! [policy]   # epsilon_frac, a0, constant_power
//! [mdp]      # q_max, n_q, n_e, n_h, n_p, tol, max_iter
//! [vcts]     # policy, q0, e0, horizon, dt, power, on_above, off_below
//! [sweep]    # axis = "system.lambda_bar", values = "1.8:1.84:5"
//! ```
//!
//! Overrides (`section.key=value`) are applied to the merged document before
//! it is deserialized and validated, and must name a key that exists.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use toml::{Table, Value};

use crate::mdp::{GridSpec, RviOptions};
use crate::params::SystemParams;
use crate::policies::{PolicyKind, PolicyOptions};
use crate::sim::{EnergyModel, SimConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("override `{0}` is not of the form key=value")]
    OverrideSyntax(String),
    #[error("override key `{0}` does not exist in the configuration")]
    UnknownKey(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSection {
    /// Slots per run, warmup included.
    pub horizon: u64,
    pub warmup_frac: f64,
    pub seed: u64,
    pub n_seeds: u64,
    pub policies: Vec<PolicyKind>,
    pub initial_q: f64,
    pub initial_e: f64,
    /// Write a per-slot trace CSV (first seed and policy only).
    pub trace: bool,
}

impl Default for SimSection {
    fn default() -> Self {
        Self {
            horizon: 100_000,
            warmup_frac: 0.2,
            seed: 1,
            n_seeds: 1,
            policies: PolicyKind::BASELINE_SET.to_vec(),
            initial_q: 0.0,
            initial_e: 0.0,
            trace: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MdpSection {
    pub q_max: f64,
    pub n_q: usize,
    pub n_e: usize,
    pub n_h: usize,
    pub n_p: usize,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for MdpSection {
    fn default() -> Self {
        let g = GridSpec::default();
        let o = RviOptions::default();
        Self {
            q_max: g.q_max,
            n_q: g.n_q,
            n_e: g.n_e,
            n_h: g.n_h,
            n_p: g.n_p,
            tol: o.tol,
            max_iter: o.max_iter,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VctsPolicyKind {
    WaterLevel,
    Constant,
    Threshold,
}

/// Fluid-model run; times in slots.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VctsSection {
    pub policy: VctsPolicyKind,
    pub q0: f64,
    pub e0: f64,
    pub horizon: f64,
    /// Step in slots (0.1 slot = τ/10).
    pub dt: f64,
    pub power: f64,
    pub on_above: f64,
    pub off_below: f64,
}

impl Default for VctsSection {
    fn default() -> Self {
        Self {
            policy: VctsPolicyKind::WaterLevel,
            q0: 0.0,
            e0: 0.0,
            horizon: 1000.0,
            dt: 0.1,
            power: 8.0,
            on_above: 40.0,
            off_below: 3.5,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    /// Dotted key of a numeric setting, e.g. `system.lambda_bar`.
    pub axis: String,
    /// `start:stop:count` or a comma-separated list.
    pub values: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub name: String,
    pub system: SystemParams,
    pub sim: SimSection,
    pub energy: EnergyModel,
    pub policy: PolicyOptions,
    pub mdp: MdpSection,
    pub vcts: VctsSection,
    pub sweep: SweepSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "default".into(),
            system: SystemParams::default(),
            sim: SimSection::default(),
            energy: EnergyModel::default(),
            policy: PolicyOptions::default(),
            mdp: MdpSection::default(),
            vcts: VctsSection::default(),
            sweep: SweepSection::default(),
        }
    }
}

fn defaults_table() -> Table {
    match Value::try_from(ExperimentConfig::default()).expect("defaults serialize") {
        Value::Table(t) => t,
        _ => unreachable!("config serializes to a table"),
    }
}

fn merge(base: &mut Table, overlay: Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parse an override value as a TOML literal, falling back to a bare string.
fn parse_literal(raw: &str) -> Value {
    let doc = format!("v = {raw}");
    match doc.parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.into())),
        Err(_) => Value::String(raw.into()),
    }
}

/// Set `dotted.key` in `table`; the key must already exist.
pub fn set_path(table: &mut Table, key: &str, value: Value) -> Result<(), ConfigError> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| ConfigError::UnknownKey(key.into()))?;
    let mut cur = table;
    for p in parts {
        cur = match cur.get_mut(p) {
            Some(Value::Table(t)) => t,
            _ => return Err(ConfigError::UnknownKey(key.into())),
        };
    }
    let slot = cur.get_mut(last).ok_or_else(|| ConfigError::UnknownKey(key.into()))?;
    // Integer-valued settings accept "5" but floats given as "5" must stay floats.
    *slot = match (&*slot, value) {
        (Value::Float(_), Value::Integer(i)) => Value::Float(i as f64),
        (_, v) => v,
    };
    Ok(())
}

impl ExperimentConfig {
    /// Merge `text` over the defaults, apply `overrides`, then validate.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let file: Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        let mut doc = defaults_table();
        merge(&mut doc, file);
        for ov in overrides {
            let (k, v) = ov.split_once('=').ok_or_else(|| ConfigError::OverrideSyntax(ov.clone()))?;
            set_path(&mut doc, k.trim(), parse_literal(v.trim()))?;
        }
        let cfg: ExperimentConfig = Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.system.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(self.sim.warmup_frac >= 0.0 && self.sim.warmup_frac < 1.0) {
            return Err(ConfigError::Invalid(format!(
                "sim.warmup_frac {} must lie in [0, 1)",
                self.sim.warmup_frac
            )));
        }
        if self.sim.horizon < 2 {
            return Err(ConfigError::Invalid("sim.horizon must be at least 2".into()));
        }
        if self.sim.n_seeds == 0 {
            return Err(ConfigError::Invalid("sim.n_seeds must be at least 1".into()));
        }
        if self.sim.policies.is_empty() {
            return Err(ConfigError::Invalid("sim.policies is empty".into()));
        }
        let eps = self.policy.epsilon_frac;
        if !(eps > 0.0 && eps < 1.0) {
            return Err(ConfigError::Invalid(format!("policy.epsilon_frac {eps} must lie in (0, 1)")));
        }
        if !(self.policy.a0 > 0.0) {
            return Err(ConfigError::Invalid("policy.a0 must be positive".into()));
        }
        if let EnergyModel::Poisson { quantum } = self.energy {
            if !(quantum > 0.0 && quantum.is_finite()) {
                return Err(ConfigError::Invalid(format!("energy.quantum {quantum} must be positive")));
            }
        }
        self.mdp_grid()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.sim.n_seeds).map(|k| self.sim.seed.wrapping_add(k)).collect()
    }

    pub fn sim_config(&self, policy: PolicyKind, seed: u64) -> SimConfig {
        let horizon = self.sim.horizon;
        SimConfig {
            params: self.system,
            policy,
            policy_options: self.policy,
            horizon,
            warmup: ((horizon as f64 * self.sim.warmup_frac) as u64).min(horizon - 1),
            seed,
            energy_model: self.energy,
            initial_q: self.sim.initial_q,
            initial_e: self.sim.initial_e,
        }
    }

    pub fn mdp_grid(&self) -> GridSpec {
        GridSpec {
            q_max: self.mdp.q_max,
            n_q: self.mdp.n_q,
            n_e: self.mdp.n_e,
            n_h: self.mdp.n_h,
            n_p: self.mdp.n_p,
            energy_model: self.energy,
        }
    }

    pub fn rvi_options(&self) -> RviOptions {
        RviOptions {
            tol: self.mdp.tol,
            max_iter: self.mdp.max_iter,
        }
    }

    /// One config per sweep value, with the axis key overwritten.
    pub fn sweep_points(&self) -> Result<Vec<(f64, ExperimentConfig)>, ConfigError> {
        if self.sweep.axis.is_empty() {
            return Err(ConfigError::Invalid("sweep.axis is not set".into()));
        }
        let values = parse_grid(&self.sweep.values)?;
        let base = match Value::try_from(self.clone()).map_err(|e| ConfigError::Invalid(e.to_string()))? {
            Value::Table(t) => t,
            _ => unreachable!("config serializes to a table"),
        };
        values
            .into_iter()
            .map(|x| {
                let mut doc = base.clone();
                set_path(&mut doc, &self.sweep.axis, Value::Float(x))?;
                let cfg: ExperimentConfig = Value::Table(doc)
                    .try_into()
                    .map_err(|e: toml::de::Error| ConfigError::Invalid(e.to_string()))?;
                cfg.validate()?;
                Ok((x, cfg))
            })
            .collect()
    }
}

/// `start:stop:count` (inclusive, evenly spaced) or `a,b,c`.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>, ConfigError> {
    let spec = spec.trim();
    let bad = || ConfigError::Invalid(format!("cannot parse sweep values `{spec}`"));
    if spec.is_empty() {
        return Err(ConfigError::Invalid("sweep grid is empty".into()));
    }
    if spec.contains(':') {
        let parts: Vec<&str> = spec.split(':').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(bad());
        }
        let start: f64 = parts[0].parse().map_err(|_| bad())?;
        let stop: f64 = parts[1].parse().map_err(|_| bad())?;
        let count: usize = parts[2].parse().map_err(|_| bad())?;
        return match count {
            0 => Err(ConfigError::Invalid("sweep grid is empty".into())),
            1 => Ok(vec![start]),
            n => Ok((0..n)
                .map(|k| start + (stop - start) * k as f64 / (n - 1) as f64)
                .collect()),
        };
    }
    spec.split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|_| bad()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = ExperimentConfig::from_toml_str("", &[]).unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
    }

    #[test]
    fn sections_merge() {
        let cfg = ExperimentConfig::from_toml_str("[system]\nlambda_bar = 0.3\nalpha_bar = 1.0\n", &[]).unwrap();
        assert_eq!(cfg.system.lambda_bar, 0.3);
        assert_eq!(cfg.system.tau, 0.1);
    }

    #[test]
    fn override_applies_and_converts_ints() {
        let cfg = ExperimentConfig::from_toml_str("", &["system.alpha_bar=4".into(), "sim.n_seeds=3".into()]).unwrap();
        assert_eq!(cfg.system.alpha_bar, 4.0);
        assert_eq!(cfg.seeds(), vec![1, 2, 3]);
    }

    #[test]
    fn unknown_override_rejected() {
        let err = ExperimentConfig::from_toml_str("", &["system.nope=1".into()]).unwrap_err();
        assert!(matches!(err, ConfigError::UnknownKey(_)));
    }

    #[test]
    fn invalid_override_does_not_revert() {
        let err = ExperimentConfig::from_toml_str("", &["system.tau=-1".into()]).unwrap_err();
        assert!(matches!(err, ConfigError::Invalid(_)));
    }

    #[test]
    fn unknown_file_key_rejected() {
        assert!(matches!(
            ExperimentConfig::from_toml_str("[system]\nfoo = 1\n", &[]),
            Err(ConfigError::Parse(_))
        ));
    }

    #[test]
    fn grids() {
        assert_eq!(parse_grid("1:2:3").unwrap(), vec![1.0, 1.5, 2.0]);
        assert_eq!(parse_grid("0.5, 1").unwrap(), vec![0.5, 1.0]);
        assert!(parse_grid("1:2:0").is_err());
        assert!(parse_grid("").is_err());
    }

    #[test]
    fn sweep_sets_axis() {
        let text = "[sweep]\naxis = \"system.lambda_bar\"\nvalues = \"1.8:1.84:5\"\n";
        let pts = ExperimentConfig::from_toml_str(text, &[]).unwrap().sweep_points().unwrap();
        assert_eq!(pts.len(), 5);
        assert!((pts[4].1.system.lambda_bar - 1.84).abs() < 1e-12);
    }
}
