//! Discretized average-cost MDP oracle.
//!
//! States are `(q_i, e_j, h_k)` on uniform queue/battery lattices and an
//! equal-probability quantization of `|h|² ~ Exp(1)`. One slot maps
//!
//! ```text
//! q → [q − ln(1 + ζ p h) τ]⁺ → split onto the q-lattice → + λτ (lattice) → cap at q_max
//! e → e − p τ               → split onto the e-lattice → + ατ (lattice) → cap at N_E
//! ```
//!
//! Splits are linear (mean preserving). The channel is i.i.d., so values are
//! stored after averaging over the next channel draw: `V(i, j)`.
//!
//! Block-correlated harvesting is collapsed to i.i.d. per slot here; the
//! simulator keeps the block structure.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::{rate, ParamError, SystemParams, SystemState};
use crate::sim::EnergyModel;

#[derive(Debug, Error)]
pub enum MdpError {
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error("value iteration stopped after {iterations} iterations with span {span:e} > {tol:e}")]
    NoConvergence { iterations: usize, span: f64, tol: f64 },
    #[error("power {p} W at state (q_index {i}, e_index {j}, h_index {h}) exceeds e/tau = {cap} W")]
    InfeasibleAction { i: usize, j: usize, h: usize, p: f64, cap: f64 },
    #[error(
        "induced chain is not unichain: average cost {cost_a} from one start vs {cost_b} from another"
    )]
    Multichain { cost_a: f64, cost_b: f64 },
    #[error("policy table does not match the grid: {0}")]
    TableMismatch(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    /// Largest representable data queue (packets).
    pub q_max: f64,
    pub n_q: usize,
    /// Battery levels spanning `[0, N_E]`.
    pub n_e: usize,
    pub n_h: usize,
    /// Nonzero power levels per state; zero power is always offered as well.
    pub n_p: usize,
    pub energy_model: EnergyModel,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            q_max: 30.0,
            n_q: 120,
            n_e: 80,
            n_h: 8,
            n_p: 12,
            energy_model: EnergyModel::default(),
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<(), MdpError> {
        if self.n_q < 2 || self.n_e < 2 || self.n_h < 1 || self.n_p < 1 {
            return Err(MdpError::Grid(format!(
                "need n_q >= 2, n_e >= 2, n_h >= 1, n_p >= 1 (got {}, {}, {}, {})",
                self.n_q, self.n_e, self.n_h, self.n_p
            )));
        }
        if !(self.q_max > 0.0 && self.q_max.is_finite()) {
            return Err(MdpError::Grid(format!("q_max {} must be positive", self.q_max)));
        }
        Ok(())
    }
}

/// `E[(S − b)⁺]` for `S` a Poisson(`m`) sum of `Exp(1)` variables.
fn compound_poisson_excess(m: f64, b: f64, n_max: usize) -> f64 {
    if b <= 0.0 {
        return m - b;
    }
    // Q(n, b) = P[Poisson(b) < n], built up term by term.
    let mut pois_n = (-m).exp();
    let mut term_b = (-b).exp();
    let mut q_n = 0.0;
    let mut total = 0.0;
    for n in 0..=n_max {
        let q_next = q_n + term_b;
        if n > 0 {
            total += pois_n * (n as f64 * q_next - b * q_n);
        }
        term_b *= b / (n as f64 + 1.0);
        q_n = q_next;
        pois_n *= m / (n as f64 + 1.0);
    }
    total.max(0.0)
}

/// Mean-preserving lattice pmf of the per-slot data arrival `λτ` in units of `step`.
pub fn arrival_lattice_pmf(mean_packets: f64, step: f64) -> Vec<f64> {
    if mean_packets <= 0.0 {
        return vec![1.0];
    }
    let mut n_max = 1usize;
    {
        let mut p = (-mean_packets).exp();
        let mut tail = 1.0 - p;
        while tail > 1e-17 && n_max < 10_000 {
            p *= mean_packets / n_max as f64;
            tail -= p;
            n_max += 1;
        }
        n_max += 2;
    }
    let c = |a: f64| -> f64 {
        if a < 0.0 {
            mean_packets / step - a
        } else {
            compound_poisson_excess(mean_packets, a * step, n_max) / step
        }
    };
    let mut pmf = Vec::new();
    let mut acc = 0.0;
    let (mut c_prev, mut c_cur) = (c(-1.0), c(0.0));
    for k in 0.. {
        let c_next = c(k as f64 + 1.0);
        let w = (c_prev - 2.0 * c_cur + c_next).max(0.0);
        pmf.push(w);
        acc += w;
        if (c_next < 1e-17 && k > 0) || acc >= 1.0 - 1e-15 || k > 100_000 {
            break;
        }
        c_prev = c_cur;
        c_cur = c_next;
    }
    let total: f64 = pmf.iter().sum();
    pmf.iter_mut().for_each(|w| *w /= total);
    while pmf.len() > 1 && *pmf.last().unwrap() < 1e-18 {
        pmf.pop();
    }
    pmf
}

/// Equal-probability bins of `Exp(1)`: `(lower edges, conditional means)`.
pub fn channel_bins(n_h: usize) -> (Vec<f64>, Vec<f64>) {
    let edges: Vec<f64> = (0..n_h).map(|k| -(1.0 - k as f64 / n_h as f64).ln()).collect();
    let reps = (0..n_h)
        .map(|k| {
            let a = edges[k];
            let upper = if k + 1 < n_h { (edges[k + 1] + 1.0) * (-edges[k + 1]).exp() } else { 0.0 };
            ((a + 1.0) * (-a).exp() - upper) * n_h as f64
        })
        .collect();
    (edges, reps)
}

/// Transition structure for one `(grid, params)` pair.
#[derive(Debug, Clone)]
pub struct Kernel {
    pub grid: GridSpec,
    pub params: SystemParams,
    pub dq: f64,
    pub de: f64,
    pub h_edges: Vec<f64>,
    pub h_reps: Vec<f64>,
    pub h_prob: f64,
    /// Lattice arrival pmf indexed by steps of `dq`.
    pub arrivals: Vec<(usize, f64)>,
    /// Lattice harvest pmf indexed by steps of `de`.
    pub energy: Vec<(usize, f64)>,
    n_act: usize,
    action_powers: Vec<f64>,
    /// Service in q-lattice steps per `(j, action, h)`.
    action_service: Vec<f64>,
    /// Post-spend battery position per `(j, action)`.
    action_residual: Vec<f64>,
}

/// Build the kernel; see the module docs for the projection rules.
pub fn build_kernel(grid: &GridSpec, params: &SystemParams) -> Result<Kernel, MdpError> {
    Kernel::new(grid, params)
}

impl Kernel {
    pub fn new(grid: &GridSpec, params: &SystemParams) -> Result<Self, MdpError> {
        grid.validate()?;
        params.validate()?;
        if params.n_e <= 0.0 {
            return Err(MdpError::Grid("N_E must be positive for the oracle grid".into()));
        }
        let dq = grid.q_max / (grid.n_q - 1) as f64;
        let de = params.n_e / (grid.n_e - 1) as f64;
        let arrivals = arrival_lattice_pmf(params.lambda_bar * params.tau, dq)
            .into_iter()
            .enumerate()
            .filter(|&(_, p)| p > 0.0)
            .collect();
        let mut energy_map: BTreeMap<usize, f64> = BTreeMap::new();
        for (alpha, p) in grid.energy_model.pmf(params.alpha_bar) {
            let x = alpha * params.tau / de;
            let lo = x.floor();
            let frac = x - lo;
            *energy_map.entry(lo as usize).or_default() += p * (1.0 - frac);
            if frac > 0.0 {
                *energy_map.entry(lo as usize + 1).or_default() += p * frac;
            }
        }
        let energy = energy_map.into_iter().filter(|&(_, p)| p > 0.0).collect();
        let (h_edges, h_reps) = channel_bins(grid.n_h);
        let n_act = grid.n_p + 1;
        let mut action_powers = vec![0.0; grid.n_e * n_act];
        for j in 0..grid.n_e {
            let cap = j as f64 * de / params.tau;
            for k in 0..grid.n_p {
                let level = if grid.n_p == 1 || k + 1 == grid.n_p {
                    cap
                } else {
                    let exponent = -3.0 * (grid.n_p - 1 - k) as f64 / (grid.n_p - 1) as f64;
                    cap * 10f64.powf(exponent)
                };
                action_powers[j * n_act + k + 1] = level;
            }
        }
        let mut action_service = Vec::with_capacity(action_powers.len() * grid.n_h);
        let mut action_residual = Vec::with_capacity(action_powers.len());
        for (idx, &p) in action_powers.iter().enumerate() {
            let j = idx / n_act;
            action_residual.push(((j as f64 * de - p * params.tau) / de).max(0.0));
            for &g in &h_reps {
                action_service.push(rate(g, p, params.zeta) * params.tau / dq);
            }
        }
        Ok(Self {
            grid: *grid,
            params: *params,
            dq,
            de,
            h_edges,
            h_reps,
            h_prob: 1.0 / grid.n_h as f64,
            arrivals,
            energy,
            n_act,
            action_powers,
            action_service,
            action_residual,
        })
    }

    pub fn n_states(&self) -> usize {
        self.grid.n_q * self.grid.n_e
    }

    pub fn q_level(&self, i: usize) -> f64 {
        i as f64 * self.dq
    }

    pub fn e_level(&self, j: usize) -> f64 {
        j as f64 * self.de
    }

    /// Candidate powers at battery index `j`; index 0 is zero power.
    pub fn actions(&self, j: usize) -> &[f64] {
        &self.action_powers[j * self.n_act..(j + 1) * self.n_act]
    }

    /// Per-slot cost `q/λ̄` (plain `q` when `λ̄ = 0`).
    pub fn cost(&self, i: usize) -> f64 {
        let q = self.q_level(i);
        if self.params.lambda_bar > 0.0 {
            q / self.params.lambda_bar
        } else {
            q
        }
    }

    fn check_power(&self, i: usize, j: usize, h: usize, p: f64) -> Result<(), MdpError> {
        let cap = self.e_level(j) / self.params.tau;
        if !(p >= 0.0) || p > cap * (1.0 + 1e-12) {
            return Err(MdpError::InfeasibleAction { i, j, h, p, cap });
        }
        Ok(())
    }

    /// Post-decision lattice coordinates `(s, r)` before arrivals.
    #[inline]
    fn post_position(&self, i: usize, j: usize, h: usize, p: f64) -> (f64, f64) {
        let tau = self.params.tau;
        let served = rate(self.h_reps[h], p, self.params.zeta) * tau;
        let s = (i as f64 - served / self.dq).max(0.0);
        let r = ((self.e_level(j) - p * tau) / self.de).max(0.0);
        (s, r)
    }

    /// Explicit next-state distribution over `(q_index, e_index)`.
    pub fn transitions(&self, i: usize, j: usize, h: usize, p: f64) -> Result<Vec<((usize, usize), f64)>, MdpError> {
        self.check_power(i, j, h, p)?;
        let (top_q, top_e) = (self.grid.n_q - 1, self.grid.n_e - 1);
        let (s, r) = self.post_position(i, j, h, p);
        let mut out: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for (iq, wq) in split(s, top_q) {
            for (je, we) in split(r, top_e) {
                for &(ka, pa) in &self.arrivals {
                    for &(ke, pe) in &self.energy {
                        let key = ((iq + ka).min(top_q), (je + ke).min(top_e));
                        *out.entry(key).or_default() += wq * we * pa * pe;
                    }
                }
            }
        }
        Ok(out.into_iter().filter(|&(_, p)| p > 0.0).collect())
    }

    /// Expected `V` after arrivals as a function of the post-decision lattice point.
    fn post_decision(&self, v: &[f64]) -> Vec<f64> {
        let (n_q, n_e) = (self.grid.n_q, self.grid.n_e);
        let (top_q, top_e) = (n_q - 1, n_e - 1);
        let mut a = vec![0.0; n_q * n_e];
        a.par_chunks_mut(n_e).enumerate().for_each(|(i, row)| {
            let vrow = &v[i * n_e..(i + 1) * n_e];
            for (jp, out) in row.iter_mut().enumerate() {
                *out = self
                    .energy
                    .iter()
                    .map(|&(k, p)| p * vrow[(jp + k).min(top_e)])
                    .sum();
            }
        });
        let mut w = vec![0.0; n_q * n_e];
        w.par_chunks_mut(n_e).enumerate().for_each(|(ip, row)| {
            for &(k, p) in &self.arrivals {
                let src = &a[(ip + k).min(top_q) * n_e..][..n_e];
                for (o, s) in row.iter_mut().zip(src) {
                    *o += p * s;
                }
            }
        });
        w
    }

    /// Subtract the one-slot transition law from `(i, j)` under post-decision
    /// positions `positions` (one per channel bin) from `row`.
    fn subtract_transition_row(&self, state: usize, positions: &[(f64, f64)], row: &mut [f64]) {
        let (n_e, top_q, top_e) = (self.grid.n_e, self.grid.n_q - 1, self.grid.n_e - 1);
        let i = state / n_e;
        let lo = positions.iter().map(|&(s, _)| floor_frac(s, top_q).0).min().unwrap_or(i);
        let hi = positions
            .iter()
            .map(|&(s, _)| (floor_frac(s, top_q).0 + 1).min(top_q))
            .max()
            .unwrap_or(i);
        let levels = hi + 1 - lo;
        let mut pre = vec![0.0; levels * n_e];
        for &(s, r) in positions {
            for (iq, wq) in split(s, top_q) {
                for (je, we) in split(r, top_e) {
                    pre[(iq - lo) * n_e + je] += self.h_prob * wq * we;
                }
            }
        }
        let mut post = vec![0.0; levels * n_e];
        for l in 0..levels {
            for jp in 0..n_e {
                let m = pre[l * n_e + jp];
                if m != 0.0 {
                    for &(k, p) in &self.energy {
                        post[l * n_e + (jp + k).min(top_e)] += m * p;
                    }
                }
            }
        }
        for l in 0..levels {
            let src = &post[l * n_e..(l + 1) * n_e];
            for &(k, p) in &self.arrivals {
                let dst = (lo + l + k).min(top_q) * n_e;
                for (o, m) in row[dst..dst + n_e].iter_mut().zip(src) {
                    *o -= p * m;
                }
            }
        }
    }

    #[inline]
    fn lookup(&self, w: &[f64], s: f64, r: f64) -> f64 {
        let n_e = self.grid.n_e;
        let (top_q, top_e) = (self.grid.n_q - 1, n_e - 1);
        let (i0, fs) = floor_frac(s, top_q);
        let (j0, fr) = floor_frac(r, top_e);
        let i1 = (i0 + 1).min(top_q);
        let j1 = (j0 + 1).min(top_e);
        let row0 = (1.0 - fr) * w[i0 * n_e + j0] + fr * w[i0 * n_e + j1];
        if fs == 0.0 {
            return row0;
        }
        let row1 = (1.0 - fr) * w[i1 * n_e + j0] + fr * w[i1 * n_e + j1];
        (1.0 - fs) * row0 + fs * row1
    }

    fn state_index(&self, i: usize, j: usize, h: usize) -> usize {
        (i * self.grid.n_e + j) * self.grid.n_h + h
    }
}

#[inline]
fn floor_frac(x: f64, top: usize) -> (usize, f64) {
    let x = x.clamp(0.0, top as f64);
    let lo = x.floor();
    let idx = lo as usize;
    if idx >= top {
        (top, 0.0)
    } else {
        (idx, x - lo)
    }
}

fn split(x: f64, top: usize) -> impl Iterator<Item = (usize, f64)> {
    let (lo, frac) = floor_frac(x, top);
    let hi = (lo + 1).min(top);
    [(lo, 1.0 - frac), (hi, frac)].into_iter().filter(|&(_, w)| w > 0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RviOptions {
    /// Stop once `max(TV − V) − min(TV − V)` falls to this.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for RviOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 100_000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MdpSolution {
    pub theta_star: f64,
    /// Relative values indexed `i * n_e + j`, normalized to 0 at `(0, 0)`.
    pub v_star: Vec<f64>,
    /// Action index per `(i, j, h)`, indexed `(i * n_e + j) * n_h + h`.
    pub policy_table: Vec<u16>,
    /// Power of the chosen action, same indexing.
    pub powers: Vec<f64>,
    /// Value-iteration sweeps after the policy-iteration warm start.
    pub iterations: usize,
    pub policy_rounds: usize,
    pub span: f64,
}

impl MdpSolution {
    pub fn value(&self, kernel: &Kernel, i: usize, j: usize) -> f64 {
        self.v_star[i * kernel.grid.n_e + j]
    }

    pub fn power(&self, kernel: &Kernel, i: usize, j: usize, h: usize) -> f64 {
        self.powers[kernel.state_index(i, j, h)]
    }

    pub fn table_policy(&self, kernel: &Kernel) -> TablePolicy {
        TablePolicy::new(kernel, self.powers.clone())
    }

    /// CSV with header `q_index,e_index,h_index,power,value`.
    pub fn write_csv<W: Write>(&self, kernel: &Kernel, writer: W) -> Result<(), MdpError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["q_index", "e_index", "h_index", "power", "value"])?;
        let g = &kernel.grid;
        for i in 0..g.n_q {
            for j in 0..g.n_e {
                let v = self.value(kernel, i, j);
                for h in 0..g.n_h {
                    w.serialize((i, j, h, self.power(kernel, i, j, h), v))?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Fixed-point loop from `v`: `backup` maps the post-decision table to `TV`.
fn iterate<F>(
    kernel: &Kernel,
    options: &RviOptions,
    mut v: Vec<f64>,
    mut backup: F,
) -> Result<(f64, Vec<f64>, usize, f64), MdpError>
where
    F: FnMut(&[f64]) -> Vec<f64>,
{
    let mut span = f64::INFINITY;
    for it in 1..=options.max_iter {
        let w = kernel.post_decision(&v);
        let tv = backup(&w);
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for (a, b) in tv.iter().zip(&v) {
            let d = a - b;
            lo = lo.min(d);
            hi = hi.max(d);
        }
        span = hi - lo;
        let reference = tv[0];
        v = tv.into_iter().map(|x| x - reference).collect();
        if span <= options.tol {
            return Ok((0.5 * (lo + hi), v, it, span));
        }
    }
    Err(MdpError::NoConvergence {
        iterations: options.max_iter,
        span,
        tol: options.tol,
    })
}

/// Bellman backup `TV` and a minimizing action per `(i, j, h)`.
///
/// With an incumbent table, an action is replaced only on a strict
/// improvement, so policy iteration cannot cycle between ties.
fn greedy(kernel: &Kernel, w: &[f64], incumbent: Option<&[u16]>) -> (Vec<f64>, Vec<u16>) {
    let g = kernel.grid;
    let (n_e, n_h) = (g.n_e, g.n_h);
    let mut tv = vec![0.0; kernel.n_states()];
    let mut acts = vec![0u16; kernel.n_states() * n_h];
    tv.par_chunks_mut(n_e)
        .zip(acts.par_chunks_mut(n_e * n_h))
        .enumerate()
        .for_each(|(i, (row, arow))| {
            for j in 0..n_e {
                let mut acc = 0.0;
                for h in 0..n_h {
                    let value = |a: usize| {
                        let act = j * kernel.n_act + a;
                        let s = (i as f64 - kernel.action_service[act * n_h + h]).max(0.0);
                        kernel.lookup(w, s, kernel.action_residual[act])
                    };
                    let mut best = f64::INFINITY;
                    let mut best_a = 0usize;
                    for a in 0..kernel.n_act {
                        let val = value(a);
                        if val < best {
                            best = val;
                            best_a = a;
                        }
                    }
                    if let Some(inc) = incumbent {
                        let a = inc[(i * n_e + j) * n_h + h] as usize;
                        let val = value(a);
                        if val <= best + 1e-12 * (1.0 + best.abs()) {
                            best = val;
                            best_a = a;
                        }
                    }
                    acc += best;
                    arow[j * n_h + h] = best_a as u16;
                }
                row[j] = kernel.cost(i) + kernel.h_prob * acc;
            }
        });
    (tv, acts)
}

fn action_positions(kernel: &Kernel, acts: &[u16]) -> Vec<(f64, f64)> {
    let (n_e, n_h) = (kernel.grid.n_e, kernel.grid.n_h);
    acts.iter()
        .enumerate()
        .map(|(idx, &a)| {
            let (i, j, h) = (idx / (n_e * n_h), (idx / n_h) % n_e, idx % n_h);
            let act = j * kernel.n_act + a as usize;
            (
                (i as f64 - kernel.action_service[act * n_h + h]).max(0.0),
                kernel.action_residual[act],
            )
        })
        .collect()
}

/// Cap on policy-improvement rounds before handing over to plain iteration.
const MAX_POLICY_ROUNDS: usize = 100;

/// Relative value iteration for the optimal average cost and a greedy policy.
///
/// The queue lattice mixes slowly (hundreds of slots per level near
/// capacity), so plain iteration from zero needs far too many sweeps.
/// Policy iteration with direct evaluation supplies the starting `V`;
/// the value-iteration loop then certifies it against the span tolerance.
pub fn relative_value_iteration(kernel: &Kernel, options: &RviOptions) -> Result<MdpSolution, MdpError> {
    let g = kernel.grid;
    let n = kernel.n_states();
    let myopic: Vec<f64> = (0..n).map(|s| kernel.cost(s / g.n_e)).collect();
    let (_, mut acts) = greedy(kernel, &kernel.post_decision(&myopic), None);
    let mut v = vec![0.0; n];
    let mut policy_rounds = 0;
    while policy_rounds < MAX_POLICY_ROUNDS {
        match solve_fixed_policy(kernel, &action_positions(kernel, &acts), false) {
            Some(sol) => v = sol.relative,
            None => break,
        }
        policy_rounds += 1;
        let (_, next) = greedy(kernel, &kernel.post_decision(&v), Some(&acts));
        if next == acts {
            break;
        }
        acts = next;
    }
    let (theta, v, iterations, span) = iterate(kernel, options, v, |w| greedy(kernel, w, None).0)?;
    let (_, policy_table) = greedy(kernel, &kernel.post_decision(&v), None);
    let powers = policy_table
        .iter()
        .enumerate()
        .map(|(idx, &a)| kernel.actions((idx / g.n_h) % g.n_e)[a as usize])
        .collect();
    Ok(MdpSolution {
        theta_star: theta,
        v_star: v,
        policy_table,
        powers,
        iterations,
        policy_rounds,
        span,
    })
}

/// Exact solution of the average-cost equations of one stationary policy.
struct FixedPolicySolve {
    /// Relative values with `h(0, 0) = 0`.
    relative: Vec<f64>,
    stationary: Option<Vec<f64>>,
}

/// Pivots below this are treated as a singular (multichain) system.
const PIVOT_FLOOR: f64 = 1e-13;

/// Solve `(I − P)h + g·1 = c` with `h` pinned at the last state, and
/// optionally `πᵀ(I − P) = 0, Σπ = 1`. `None` if the system is singular.
fn solve_fixed_policy(kernel: &Kernel, positions: &[(f64, f64)], with_stationary: bool) -> Option<FixedPolicySolve> {
    let g = kernel.grid;
    let (n_e, n_h) = (g.n_e, g.n_h);
    let n = kernel.n_states();
    let mut drop = 0;
    for (idx, &(s, _)) in positions.iter().enumerate() {
        let i = idx / (n_e * n_h);
        drop = drop.max(i.saturating_sub(floor_frac(s, g.n_q - 1).0));
    }
    let lower = ((drop + 1) * n_e).min(n - 1);
    let mut a = vec![0.0; n * n];
    a.par_chunks_mut(n).enumerate().for_each(|(s, row)| {
        kernel.subtract_transition_row(s, &positions[s * n_h..(s + 1) * n_h], row);
        row[s] += 1.0;
        // The last unknown is the gain; its column multiplies 1 in every row.
        row[n - 1] = 1.0;
    });
    let lu = BandLu::factor(n, lower, a)?;
    let mut x: Vec<f64> = (0..n).map(|s| kernel.cost(s / n_e)).collect();
    lu.solve(&mut x);
    let gain = x[n - 1];
    x[n - 1] = 0.0;
    let shift = x[0];
    let relative: Vec<f64> = x.iter().map(|h| h - shift).collect();
    let stationary = with_stationary.then(|| {
        let mut pi = vec![0.0; n];
        pi[n - 1] = 1.0;
        lu.solve_transpose(&mut pi);
        pi
    });
    if !gain.is_finite() || relative.iter().any(|h| !h.is_finite()) {
        return None;
    }
    Some(FixedPolicySolve {
        relative,
        stationary,
    })
}

/// LU with partial pivoting of a dense row-major matrix whose entries below
/// the diagonal lie within `lower` of it. Only those rows are eliminated,
/// so the cost is `O(n² · lower)` instead of `O(n³)`.
struct BandLu {
    n: usize,
    a: Vec<f64>,
    piv: Vec<usize>,
}

impl BandLu {
    fn factor(n: usize, lower: usize, mut a: Vec<f64>) -> Option<Self> {
        let mut piv = vec![0; n];
        for k in 0..n {
            let end = (k + lower + 1).min(n);
            let p = (k..end)
                .max_by(|&x, &y| a[x * n + k].abs().total_cmp(&a[y * n + k].abs()))
                .unwrap_or(k);
            let pivot = a[p * n + k];
            if !(pivot.abs() > PIVOT_FLOOR) {
                return None;
            }
            piv[k] = p;
            if p != k {
                let (head, tail) = a.split_at_mut(p * n);
                head[k * n..(k + 1) * n].swap_with_slice(&mut tail[..n]);
            }
            let (head, tail) = a.split_at_mut((k + 1) * n);
            let prow = &head[k * n + k + 1..(k + 1) * n];
            tail[..(end - k - 1) * n].par_chunks_mut(n).for_each(|row| {
                let f = row[k] / pivot;
                row[k] = f;
                if f != 0.0 {
                    for (x, y) in row[k + 1..].iter_mut().zip(prow) {
                        *x -= f * y;
                    }
                }
            });
        }
        Some(Self { n, a, piv })
    }

    fn solve(&self, b: &mut [f64]) {
        let n = self.n;
        for (k, &p) in self.piv.iter().enumerate() {
            b.swap(k, p);
        }
        for r in 0..n {
            let row = &self.a[r * n..r * n + r];
            let s: f64 = row.iter().zip(&b[..r]).map(|(l, y)| l * y).sum();
            b[r] -= s;
        }
        for r in (0..n).rev() {
            let row = &self.a[r * n..(r + 1) * n];
            let s: f64 = row[r + 1..].iter().zip(&b[r + 1..]).map(|(u, x)| u * x).sum();
            b[r] = (b[r] - s) / row[r];
        }
    }

    fn solve_transpose(&self, b: &mut [f64]) {
        let n = self.n;
        for k in 0..n {
            let row = &self.a[k * n..(k + 1) * n];
            b[k] /= row[k];
            let z = b[k];
            for (x, u) in b[k + 1..].iter_mut().zip(&row[k + 1..]) {
                *x -= z * u;
            }
        }
        for k in (0..n).rev() {
            let w = b[k];
            for (x, l) in b[..k].iter_mut().zip(&self.a[k * n..k * n + k]) {
                *x -= w * l;
            }
        }
        for (k, &p) in self.piv.iter().enumerate().rev() {
            b.swap(k, p);
        }
    }
}

/// Fixed policy on the grid: a power for every `(i, j, h)`.
#[derive(Debug, Clone)]
pub struct GridPolicy {
    pub powers: Vec<f64>,
}

impl GridPolicy {
    /// Tabulate `f(|h|², q, e)` at the grid points (channel representatives).
    pub fn from_fn<F>(kernel: &Kernel, f: F) -> Self
    where
        F: Fn(&SystemState) -> f64,
    {
        let g = kernel.grid;
        let mut powers = Vec::with_capacity(kernel.n_states() * g.n_h);
        for i in 0..g.n_q {
            for j in 0..g.n_e {
                for h in 0..g.n_h {
                    powers.push(f(&SystemState::new(kernel.h_reps[h], kernel.q_level(i), kernel.e_level(j))));
                }
            }
        }
        Self { powers }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolicyEvaluation {
    /// Average cost certified by fixed-policy relative value iteration.
    pub average_cost: f64,
    /// Average cost under the stationary distribution.
    pub stationary_cost: f64,
    /// Stationary mass on `q = q_max`.
    pub boundary_mass: f64,
    pub iterations: usize,
    pub span: f64,
    pub warning: Option<String>,
}

/// Boundary mass above which the truncated grid is deemed too small.
pub const BOUNDARY_MASS_LIMIT: f64 = 1e-3;

/// Long-run average cost of a fixed grid policy.
pub fn evaluate_policy_on_grid(
    kernel: &Kernel,
    policy: &GridPolicy,
    options: &RviOptions,
) -> Result<PolicyEvaluation, MdpError> {
    let g = kernel.grid;
    let (n_e, n_h) = (g.n_e, g.n_h);
    if policy.powers.len() != kernel.n_states() * n_h {
        return Err(MdpError::TableMismatch(format!(
            "{} powers for {} states",
            policy.powers.len(),
            kernel.n_states() * n_h
        )));
    }
    let mut positions = Vec::with_capacity(policy.powers.len());
    for i in 0..g.n_q {
        for j in 0..n_e {
            for h in 0..n_h {
                let p = policy.powers[kernel.state_index(i, j, h)];
                kernel.check_power(i, j, h, p)?;
                positions.push(kernel.post_position(i, j, h, p));
            }
        }
    }
    let backup = |w: &[f64]| -> Vec<f64> {
        let mut tv = vec![0.0; kernel.n_states()];
        tv.par_chunks_mut(n_e).enumerate().for_each(|(i, row)| {
            for (j, out) in row.iter_mut().enumerate() {
                let base = (i * n_e + j) * n_h;
                let acc: f64 = positions[base..base + n_h]
                    .iter()
                    .map(|&(s, r)| kernel.lookup(w, s, r))
                    .sum();
                *out = kernel.cost(i) + kernel.h_prob * acc;
            }
        });
        tv
    };
    let direct = solve_fixed_policy(kernel, &positions, true);
    let start = direct.as_ref().map_or_else(|| vec![0.0; kernel.n_states()], |d| d.relative.clone());
    let (average_cost, iterations, span) = match iterate(kernel, options, start, backup) {
        Ok((theta, _, it, span)) => (theta, it, span),
        Err(MdpError::NoConvergence { iterations, span, tol }) => {
            let uniform = stationary(kernel, &positions, Start::Uniform);
            let corner = stationary(kernel, &positions, Start::EmptyFull);
            if (uniform.0 - corner.0).abs() > 1e-6 * (1.0 + uniform.0.abs()) {
                return Err(MdpError::Multichain {
                    cost_a: uniform.0,
                    cost_b: corner.0,
                });
            }
            return Err(MdpError::NoConvergence { iterations, span, tol });
        }
        Err(e) => return Err(e),
    };
    let (stationary_cost, boundary_mass) = match direct.and_then(|d| d.stationary) {
        Some(pi) => {
            let top = (g.n_q - 1) * n_e;
            let cost = pi.iter().enumerate().map(|(s, m)| m * kernel.cost(s / n_e)).sum();
            (cost, pi[top..].iter().sum())
        }
        None => stationary(kernel, &positions, Start::Uniform),
    };
    let warning = (boundary_mass > BOUNDARY_MASS_LIMIT).then(|| {
        format!("stationary mass {boundary_mass:.3e} at q_max exceeds {BOUNDARY_MASS_LIMIT:e}; raise q_max")
    });
    Ok(PolicyEvaluation {
        average_cost,
        stationary_cost,
        boundary_mass,
        iterations,
        span,
        warning,
    })
}

#[derive(Clone, Copy)]
enum Start {
    Uniform,
    EmptyFull,
}

/// Lazy power iteration for the stationary law; returns `(cost, boundary mass)`.
/// Fallback and multichain diagnostic only.
fn stationary(kernel: &Kernel, positions: &[(f64, f64)], start: Start) -> (f64, f64) {
    let g = kernel.grid;
    let (n_q, n_e, n_h) = (g.n_q, g.n_e, g.n_h);
    let (top_q, top_e) = (n_q - 1, n_e - 1);
    let n = kernel.n_states();
    let mut mu = match start {
        Start::Uniform => vec![1.0 / n as f64; n],
        Start::EmptyFull => {
            let mut m = vec![0.0; n];
            m[top_e] = 1.0;
            m
        }
    };
    for _ in 0..20_000 {
        let mut post = vec![0.0; n];
        for (state, &mass) in mu.iter().enumerate() {
            if mass == 0.0 {
                continue;
            }
            for &(s, r) in &positions[state * n_h..(state + 1) * n_h] {
                let m = mass * kernel.h_prob;
                for (iq, wq) in split(s, top_q) {
                    for (je, we) in split(r, top_e) {
                        post[iq * n_e + je] += m * wq * we;
                    }
                }
            }
        }
        let mut after_energy = vec![0.0; n];
        for i in 0..n_q {
            for jp in 0..n_e {
                let m = post[i * n_e + jp];
                if m == 0.0 {
                    continue;
                }
                for &(k, p) in &kernel.energy {
                    after_energy[i * n_e + (jp + k).min(top_e)] += m * p;
                }
            }
        }
        let mut next = vec![0.0; n];
        for ip in 0..n_q {
            for &(k, p) in &kernel.arrivals {
                let dst = (ip + k).min(top_q) * n_e;
                for jp in 0..n_e {
                    next[dst + jp] += p * after_energy[ip * n_e + jp];
                }
            }
        }
        let mut change = 0.0;
        for (m, x) in mu.iter_mut().zip(&next) {
            let lazy = 0.5 * (*m + x);
            change += (lazy - *m).abs();
            *m = lazy;
        }
        if change < 1e-13 {
            break;
        }
    }
    let cost = (0..n).map(|s| mu[s] * kernel.cost(s / n_e)).sum();
    let boundary = mu[top_q * n_e..].iter().sum();
    (cost, boundary)
}

/// Grid-table policy for the simulator: nearest queue level, battery level
/// rounded down, channel bin by gain.
#[derive(Debug, Clone, PartialEq)]
pub struct TablePolicy {
    pub grid: GridSpec,
    dq: f64,
    de: f64,
    tau: f64,
    h_edges: Vec<f64>,
    powers: Vec<f64>,
}

impl TablePolicy {
    pub fn new(kernel: &Kernel, powers: Vec<f64>) -> Self {
        Self {
            grid: kernel.grid,
            dq: kernel.dq,
            de: kernel.de,
            tau: kernel.params.tau,
            h_edges: kernel.h_edges.clone(),
            powers,
        }
    }

    /// Load a table written by [`MdpSolution::write_csv`].
    pub fn from_csv<R: Read>(kernel: &Kernel, reader: R) -> Result<Self, MdpError> {
        let g = kernel.grid;
        let total = kernel.n_states() * g.n_h;
        let mut powers = vec![f64::NAN; total];
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["q_index", "e_index", "h_index", "power", "value"] {
            return Err(MdpError::TableMismatch(format!("unexpected header {headers:?}")));
        }
        for rec in rdr.deserialize() {
            let (i, j, h, p, _v): (usize, usize, usize, f64, f64) = rec?;
            if i >= g.n_q || j >= g.n_e || h >= g.n_h {
                return Err(MdpError::TableMismatch(format!(
                    "index ({i}, {j}, {h}) outside grid {} x {} x {}",
                    g.n_q, g.n_e, g.n_h
                )));
            }
            kernel.check_power(i, j, h, p)?;
            powers[kernel.state_index(i, j, h)] = p;
        }
        if let Some(missing) = powers.iter().position(|p| p.is_nan()) {
            return Err(MdpError::TableMismatch(format!("no entry for flat index {missing}")));
        }
        Ok(Self::new(kernel, powers))
    }

    /// Flat `(q, e, h)` table in the kernel's state order.
    pub fn powers(&self) -> &[f64] {
        &self.powers
    }

    pub fn power(&self, state: &SystemState) -> f64 {
        let g = &self.grid;
        let i = ((state.q / self.dq).round() as usize).min(g.n_q - 1);
        let j = ((state.e / self.de).floor().max(0.0) as usize).min(g.n_e - 1);
        let h = self.h_edges.partition_point(|&edge| edge <= state.h2).saturating_sub(1);
        let p = self.powers[(i * g.n_e + j) * g.n_h + h];
        p.min(state.e / self.tau)
    }
}

/// Grid and model description written next to an exported table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdpMeta {
    pub params: SystemParams,
    pub grid: GridSpec,
    pub theta_star: f64,
    pub iterations: usize,
    pub span: f64,
}
