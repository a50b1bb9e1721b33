//! Slot-level simulator of the data and energy queues.
//!
//! ```text
//! Q' = [Q − ln(1 + ζ p |h|²) τ]⁺ + λ τ
//! E' = min{E − p τ + α τ, N_E}
//! ```
//!
//! Randomness comes from three ChaCha8 streams of one master seed (channel,
//! data, energy). Each stream is consumed identically whatever the policy
//! does, so runs of different policies under one seed see the same
//! `(h, λ, α)` sample path.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, Gamma, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mdp::TablePolicy;
use crate::params::{rate, ParamError, SystemParams, SystemState};
use crate::policies::{Policy, PolicyError, PolicyKind, PolicyOptions};

/// Relative slack on `p τ ≤ E` for floating-point rounding only.
const AVAILABILITY_RTOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("policy {policy} violated energy availability at slot {slot}: p = {p} W, p*tau = {spend} J > E = {e} J")]
    Availability {
        policy: String,
        slot: u64,
        p: f64,
        spend: f64,
        e: f64,
    },
    #[error("invalid power {p} W at slot {slot} from policy {policy}")]
    InvalidPower { policy: String, slot: u64, p: f64 },
    #[error("invalid simulation config: {0}")]
    Config(String),
}

/// Availability failure from a bare [`step`], before the policy is known.
#[derive(Debug, Error, Clone, Copy, PartialEq)]
#[error("p*tau = {spend} J exceeds stored energy {e} J (p = {p} W)")]
pub struct StepError {
    pub p: f64,
    pub spend: f64,
    pub e: f64,
}

/// One slot of the queue recursions. The returned state keeps `h2`.
pub fn step(
    state: &SystemState,
    p: f64,
    lambda_n: f64,
    alpha_n: f64,
    params: &SystemParams,
) -> Result<SystemState, StepError> {
    let tau = params.tau;
    let spend = p * tau;
    if !(p >= 0.0) || spend > state.e * (1.0 + AVAILABILITY_RTOL) + f64::MIN_POSITIVE {
        return Err(StepError { p, spend, e: state.e });
    }
    let served = rate(state.h2, p, params.zeta) * tau;
    let q = (state.q - served).max(0.0) + lambda_n * tau;
    // max(0) only absorbs the rounding admitted above.
    let e = ((state.e - spend).max(0.0) + alpha_n * tau).min(params.n_e);
    Ok(SystemState { h2: state.h2, q, e })
}

/// `|h|² ~ Exp(1)` under Rayleigh fading.
pub fn sample_channel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(Exp1)
}

/// Harvested-power distribution per energy block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnergyModel {
    /// `α = s·quantum·K`, `K ~ Poisson(ᾱ/quantum)` truncated at four times its
    /// mean; `s` restores the mean to `ᾱ` after truncation.
    Poisson { quantum: f64 },
    /// `α ≡ ᾱ`.
    Deterministic,
}

impl Default for EnergyModel {
    fn default() -> Self {
        EnergyModel::Poisson { quantum: 1.0 }
    }
}

impl EnergyModel {
    /// Support and probabilities of the per-block harvest power.
    pub fn pmf(&self, alpha_bar: f64) -> Vec<(f64, f64)> {
        match *self {
            EnergyModel::Deterministic => vec![(alpha_bar, 1.0)],
            EnergyModel::Poisson { quantum } => {
                let m = alpha_bar / quantum;
                let k_max = ((4.0 * m).floor() as usize).max(1);
                let ln_m = m.ln();
                let mut log_p = -m;
                let mut probs = Vec::with_capacity(k_max + 1);
                probs.push(log_p.exp());
                for k in 1..=k_max {
                    log_p += ln_m - (k as f64).ln();
                    probs.push(log_p.exp());
                }
                let total: f64 = probs.iter().sum();
                let mean_k: f64 = probs.iter().enumerate().map(|(k, p)| k as f64 * p).sum::<f64>() / total;
                let scale = m / mean_k;
                probs
                    .into_iter()
                    .enumerate()
                    .map(|(k, p)| (quantum * k as f64 * scale, p / total))
                    .collect()
            }
        }
    }

    fn validate(&self) -> Result<(), SimError> {
        if let EnergyModel::Poisson { quantum } = self {
            if !(*quantum > 0.0 && quantum.is_finite()) {
                return Err(SimError::Config(format!("energy quantum {quantum} must be positive")));
            }
        }
        Ok(())
    }
}

/// Inverse-CDF sampler over a finite pmf.
#[derive(Debug, Clone)]
struct DiscreteSampler {
    values: Vec<f64>,
    cdf: Vec<f64>,
}

impl DiscreteSampler {
    fn new(pmf: &[(f64, f64)]) -> Self {
        let mut acc = 0.0;
        let mut values = Vec::with_capacity(pmf.len());
        let mut cdf = Vec::with_capacity(pmf.len());
        for &(v, p) in pmf {
            acc += p;
            values.push(v);
            cdf.push(acc);
        }
        if let Some(last) = cdf.last_mut() {
            *last = f64::INFINITY;
        }
        Self { values, cdf }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        let idx = self.cdf.partition_point(|&c| c <= u);
        self.values[idx.min(self.values.len() - 1)]
    }
}

/// Data and energy arrival generator with its own RNG streams.
#[derive(Debug, Clone)]
pub struct ArrivalProcess {
    tau: f64,
    block_len: u64,
    packets: Option<Poisson<f64>>,
    energy: DiscreteSampler,
    data_rng: ChaCha8Rng,
    energy_rng: ChaCha8Rng,
    slot: u64,
    current_alpha: f64,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

const CHANNEL_STREAM: u64 = 0;
const DATA_STREAM: u64 = 1;
const ENERGY_STREAM: u64 = 2;

impl ArrivalProcess {
    pub fn new(params: &SystemParams, model: &EnergyModel, seed: u64) -> Self {
        let mean_packets = params.lambda_bar * params.tau;
        Self {
            tau: params.tau,
            block_len: params.block_len,
            packets: (mean_packets > 0.0).then(|| Poisson::new(mean_packets).expect("positive mean")),
            energy: DiscreteSampler::new(&model.pmf(params.alpha_bar)),
            data_rng: stream(seed, DATA_STREAM),
            energy_rng: stream(seed, ENERGY_STREAM),
            slot: 0,
            current_alpha: 0.0,
        }
    }

    /// `(λ(n), α(n))` for the next slot: Poisson packet count with `Exp(1)`
    /// sizes, and a harvest power redrawn every `N` slots.
    pub fn next_arrivals(&mut self) -> (f64, f64) {
        let lambda = match &self.packets {
            Some(dist) => {
                let count: f64 = self.data_rng.sample(dist);
                if count > 0.0 {
                    let total: f64 = self.data_rng.sample(Gamma::new(count, 1.0).expect("positive shape"));
                    total / self.tau
                } else {
                    0.0
                }
            }
            None => 0.0,
        };
        if self.slot.is_multiple_of(self.block_len) {
            self.current_alpha = self.energy.sample(&mut self.energy_rng);
        }
        self.slot += 1;
        (lambda, self.current_alpha)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub params: SystemParams,
    pub policy: PolicyKind,
    pub policy_options: PolicyOptions,
    pub horizon: u64,
    pub warmup: u64,
    pub seed: u64,
    pub energy_model: EnergyModel,
    pub initial_q: f64,
    pub initial_e: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            params: SystemParams::default(),
            policy: PolicyKind::ClosedForm,
            policy_options: PolicyOptions::default(),
            horizon: 100_000,
            warmup: 20_000,
            seed: 1,
            energy_model: EnergyModel::default(),
            initial_q: 0.0,
            initial_e: 0.0,
        }
    }
}

impl SimConfig {
    /// Config with the default 20% warmup.
    pub fn new(params: SystemParams, policy: PolicyKind, horizon: u64, seed: u64) -> Self {
        Self {
            params,
            policy,
            horizon,
            warmup: horizon / 5,
            seed,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        self.params.validate()?;
        self.energy_model.validate()?;
        if self.warmup >= self.horizon {
            return Err(SimError::Config(format!(
                "warmup {} must be below horizon {}",
                self.warmup, self.horizon
            )));
        }
        if !(self.initial_q >= 0.0 && self.initial_e >= 0.0 && self.initial_e <= self.params.n_e) {
            return Err(SimError::Config("initial state outside q >= 0, 0 <= e <= N_E".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StabilityVerdict {
    Plateau,
    Diverging,
}

impl StabilityVerdict {
    pub fn as_str(self) -> &'static str {
        match self {
            StabilityVerdict::Plateau => "plateau",
            StabilityVerdict::Diverging => "diverging",
        }
    }
}

/// Relative growth of the final window above which the `Q²` mean is diverging.
pub const PLATEAU_RTOL: f64 = 0.01;

/// Compare the last two running means of `Q²`.
pub fn plateau_verdict(running_means: &[f64]) -> (StabilityVerdict, f64) {
    let n = running_means.len();
    if n < 2 {
        return (StabilityVerdict::Plateau, 0.0);
    }
    let (prev, last) = (running_means[n - 2], running_means[n - 1]);
    if last == 0.0 && prev == 0.0 {
        return (StabilityVerdict::Plateau, 0.0);
    }
    let rel = (last - prev) / last.abs().max(f64::MIN_POSITIVE);
    let verdict = if rel < PLATEAU_RTOL {
        StabilityVerdict::Plateau
    } else {
        StabilityVerdict::Diverging
    };
    (verdict, rel)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub slots: u64,
    /// Mean data queue (packets).
    pub avg_queue: f64,
    /// Mean delay (s), `avg_queue/λ̄`.
    pub avg_delay: f64,
    pub avg_power: f64,
    /// Slots in which the battery cap discarded harvested energy.
    pub cap_events: u64,
    pub q2_mean: f64,
    /// Running `Q²` mean at ten evenly spaced points of the measured window.
    pub q2_checkpoints: Vec<f64>,
    pub stability_verdict: StabilityVerdict,
    /// Multiplier of the dual baselines after warmup.
    pub final_gamma: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceRow {
    pub slot: u64,
    pub h2: f64,
    #[serde(rename = "Q")]
    pub q: f64,
    #[serde(rename = "E")]
    pub e: f64,
    pub p: f64,
    pub lambda: f64,
    pub alpha: f64,
}

/// Run with a policy built from the config (`mdp_table` needs `table`).
pub fn run_simulation(config: &SimConfig) -> Result<Metrics, SimError> {
    run_simulation_with_table(config, None)
}

pub fn run_simulation_with_table(config: &SimConfig, table: Option<&TablePolicy>) -> Result<Metrics, SimError> {
    config.validate()?;
    let policy = Policy::build(config.policy, &config.params, &config.policy_options, table)?;
    simulate(config, policy, &default_checkpoints(config), None).map(|(m, _)| m)
}

/// Run an explicit policy, optionally recording a per-slot trace.
pub fn run_with_policy(
    config: &SimConfig,
    policy: Policy,
    trace: Option<&mut Vec<TraceRow>>,
) -> Result<Metrics, SimError> {
    config.validate()?;
    simulate(config, policy, &default_checkpoints(config), trace).map(|(m, _)| m)
}

fn default_checkpoints(config: &SimConfig) -> Vec<u64> {
    let measured = config.horizon - config.warmup;
    (1..=10u64).map(|i| config.warmup + (measured * i / 10).max(1)).collect()
}

/// Core loop. `checkpoints` are absolute slot counts at which the running
/// post-warmup `Q²` mean is sampled.
fn simulate(
    config: &SimConfig,
    mut policy: Policy,
    checkpoints: &[u64],
    mut trace: Option<&mut Vec<TraceRow>>,
) -> Result<(Metrics, Vec<(u64, f64)>), SimError> {
    let params = &config.params;
    let mut channel_rng = stream(config.seed, CHANNEL_STREAM);
    let mut arrivals = ArrivalProcess::new(params, &config.energy_model, config.seed);
    let mut state = SystemState::new(0.0, config.initial_q, config.initial_e);
    let (mut sum_q, mut sum_q2, mut sum_p) = (0.0, 0.0, 0.0);
    let mut cap_events = 0u64;
    let mut probes = Vec::with_capacity(checkpoints.len());
    let mut next_probe = 0usize;
    let name = policy.kind().as_str();
    for slot in 0..config.horizon {
        if slot == config.warmup {
            policy.freeze();
        }
        state.h2 = sample_channel(&mut channel_rng);
        let (lambda_n, alpha_n) = arrivals.next_arrivals();
        let p = policy.power(&state);
        if !p.is_finite() {
            return Err(SimError::InvalidPower {
                policy: name.into(),
                slot,
                p,
            });
        }
        if slot < config.warmup {
            policy.observe(p);
        } else {
            sum_q += state.q;
            sum_q2 += state.q * state.q;
            sum_p += p;
        }
        if let Some(rows) = trace.as_deref_mut() {
            rows.push(TraceRow {
                slot,
                h2: state.h2,
                q: state.q,
                e: state.e,
                p,
                lambda: lambda_n,
                alpha: alpha_n,
            });
        }
        let next = step(&state, p, lambda_n, alpha_n, params).map_err(|err| SimError::Availability {
            policy: name.into(),
            slot,
            p: err.p,
            spend: err.spend,
            e: err.e,
        })?;
        if slot >= config.warmup && state.e - p * params.tau + alpha_n * params.tau > params.n_e {
            cap_events += 1;
        }
        debug_assert!(next.q >= 0.0 && next.e >= 0.0 && next.e <= params.n_e);
        state = next;
        let done = slot + 1;
        while next_probe < checkpoints.len() && checkpoints[next_probe] <= done {
            let measured = done.saturating_sub(config.warmup);
            let mean = if measured > 0 { sum_q2 / measured as f64 } else { 0.0 };
            probes.push((checkpoints[next_probe], mean));
            next_probe += 1;
        }
    }
    let n = (config.horizon - config.warmup) as f64;
    let avg_queue = sum_q / n;
    let avg_delay = if params.lambda_bar > 0.0 {
        avg_queue / params.lambda_bar
    } else {
        0.0
    };
    let running: Vec<f64> = probes.iter().map(|&(_, m)| m).collect();
    let (stability_verdict, _) = plateau_verdict(&running);
    let metrics = Metrics {
        slots: config.horizon - config.warmup,
        avg_queue,
        avg_delay,
        avg_power: sum_p / n,
        cap_events,
        q2_mean: sum_q2 / n,
        q2_checkpoints: running,
        stability_verdict,
        final_gamma: policy.dual().map(|d| d.gamma),
    };
    Ok((metrics, probes))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityProbe {
    /// `(slot, running post-warmup mean of Q²)`.
    pub checkpoints: Vec<(u64, f64)>,
    pub verdict: StabilityVerdict,
    /// Relative change of the running mean over the final window.
    pub last_window_change: f64,
}

/// Running `Q²` means at the requested slots plus a plateau/diverging verdict.
pub fn stability_probe(config: &SimConfig, checkpoints: &[u64]) -> Result<StabilityProbe, SimError> {
    config.validate()?;
    let mut sorted: Vec<u64> = checkpoints
        .iter()
        .copied()
        .filter(|&c| c > config.warmup && c <= config.horizon)
        .collect();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() < 2 {
        return Err(SimError::Config(
            "stability probe needs at least two checkpoints after warmup".into(),
        ));
    }
    let policy = Policy::build(config.policy, &config.params, &config.policy_options, None)?;
    let (_, probes) = simulate(config, policy, &sorted, None)?;
    let running: Vec<f64> = probes.iter().map(|&(_, m)| m).collect();
    let (verdict, last_window_change) = plateau_verdict(&running);
    Ok(StabilityProbe {
        checkpoints: probes,
        verdict,
        last_window_change,
    })
}

/// Sample mean and standard error.
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> SystemParams {
        SystemParams {
            tau: 0.1,
            lambda_bar: 1.0,
            alpha_bar: 5.0,
            n_e: 50.0,
            block_len: 1,
            zeta: 1.0,
            alpha_th: 3.6,
        }
    }

    #[test]
    fn idle_step_keeps_queue() {
        let p = params();
        let s = SystemState::new(1.0, 3.0, 10.0);
        let n = step(&s, 0.0, 0.0, 5.0, &p).unwrap();
        assert_eq!(n.q, 3.0);
        assert_eq!(n.e, 10.5);
    }

    #[test]
    fn queue_empties() {
        let p = params();
        let s = SystemState::new(1.0, 0.01, 10.0);
        let n = step(&s, 10.0, 2.0, 0.0, &p).unwrap();
        assert!((n.q - 0.2).abs() < 1e-15);
    }

    #[test]
    fn battery_cap() {
        let p = params();
        let s = SystemState::new(1.0, 0.0, 49.9);
        assert_eq!(step(&s, 0.0, 0.0, 5.0, &p).unwrap().e, 50.0);
    }

    #[test]
    fn availability_violation() {
        let p = params();
        let s = SystemState::new(1.0, 0.0, 0.5);
        assert!(step(&s, 6.0, 0.0, 0.0, &p).is_err());
        assert!(step(&s, 5.0, 0.0, 0.0, &p).is_ok());
    }

    #[test]
    fn poisson_pmf_keeps_mean() {
        let pmf = EnergyModel::Poisson { quantum: 1.0 }.pmf(2.5);
        let total: f64 = pmf.iter().map(|p| p.1).sum();
        let mean: f64 = pmf.iter().map(|p| p.0 * p.1).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!((mean - 2.5).abs() < 1e-12);
        assert!(pmf.last().unwrap().0 <= 4.0 * 2.5 * 1.01);
    }

    #[test]
    fn blocks_hold_alpha() {
        let mut p = params();
        p.block_len = 7;
        let mut a = ArrivalProcess::new(&p, &EnergyModel::default(), 3);
        let first: Vec<f64> = (0..7).map(|_| a.next_arrivals().1).collect();
        assert!(first.iter().all(|&x| x == first[0]));
    }

    #[test]
    fn zero_rate_gives_zero_delay() {
        let mut cfg = SimConfig::new(params().with_lambda(0.0), PolicyKind::Greedy, 2000, 1);
        cfg.initial_e = 1.0;
        let m = run_simulation(&cfg).unwrap();
        assert_eq!(m.avg_delay, 0.0);
        assert_eq!(m.q2_mean, 0.0);
    }

    #[test]
    fn seed_determinism() {
        let cfg = SimConfig::new(params(), PolicyKind::Qwwf, 5000, 9);
        assert_eq!(run_simulation(&cfg).unwrap(), run_simulation(&cfg).unwrap());
    }

    #[test]
    fn warmup_must_precede_horizon() {
        let mut cfg = SimConfig::new(params(), PolicyKind::Greedy, 100, 1);
        cfg.warmup = 100;
        assert!(matches!(run_simulation(&cfg), Err(SimError::Config(_))));
    }

    #[test]
    fn mean_stderr_basic() {
        let (m, s) = mean_stderr(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
    }
}
