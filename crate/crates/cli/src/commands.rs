use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use ehopt_core::config::{ConfigError, ExperimentConfig, VctsPolicyKind};
use ehopt_core::mdp::{self, GridPolicy, MdpError, MdpMeta, TablePolicy};
use ehopt_core::numerics::{self, RateBounds};
use ehopt_core::params::SystemParams;
use ehopt_core::policies::{self, DualState, PolicyKind};
use ehopt_core::priority::{self, PriorityError, PriorityModel, Regime};
use ehopt_core::sim::{self, mean_stderr, Metrics, SimError};
use ehopt_core::vcts::{self, FluidPolicy, VctsError};

use crate::CommonArgs;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("infeasible parameters: {0}")]
    Infeasible(String),
    #[error("artifact mismatch: {0}")]
    Mismatch(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Runtime(_) => 1,
            CliError::Config(_) => 2,
            CliError::Infeasible(_) => 3,
            CliError::Mismatch(_) => 4,
        }
    }
}

fn runtime<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Config(msg) => CliError::Config(ConfigError::Invalid(msg)),
            SimError::Param(p) => CliError::Config(ConfigError::Invalid(p.to_string())),
            SimError::Policy(policies::PolicyError::Priority(PriorityError::Infeasible(msg))) => {
                CliError::Infeasible(msg)
            }
            SimError::Policy(p) => CliError::Config(ConfigError::Invalid(p.to_string())),
            other => runtime(other),
        }
    }
}

impl From<PriorityError> for CliError {
    fn from(e: PriorityError) -> Self {
        match e {
            PriorityError::Infeasible(msg) => CliError::Infeasible(msg),
            PriorityError::Param(p) => CliError::Config(ConfigError::Invalid(p.to_string())),
            other => runtime(other),
        }
    }
}

fn load(args: &CommonArgs) -> Result<ExperimentConfig, CliError> {
    let mut overrides = args.overrides.clone();
    if let Some(seed) = args.seed {
        overrides.push(format!("sim.seed={seed}"));
    }
    Ok(ExperimentConfig::load(&args.config, &overrides)?)
}

fn out_dir(args: &CommonArgs) -> Result<&Path, CliError> {
    fs::create_dir_all(&args.out).map_err(|e| {
        CliError::Config(ConfigError::Invalid(format!(
            "output directory {} is not writable: {e}",
            args.out.display()
        )))
    })?;
    Ok(&args.out)
}

fn pool(args: &CommonArgs) -> Result<rayon::ThreadPool, CliError> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = args.jobs {
        if n == 0 {
            return Err(CliError::Config(ConfigError::Invalid("--jobs must be at least 1".into())));
        }
        b = b.num_threads(n);
    }
    b.build().map_err(runtime)
}

/// Reject rates at or above `exp(1/x)E₁(1/x)`.
fn check_feasible(params: &SystemParams) -> Result<(), CliError> {
    if params.lambda_bar == 0.0 {
        return Ok(());
    }
    let b = RateBounds::for_alpha(params.alpha_bar).map_err(runtime)?;
    if params.lambda_bar >= b.upper {
        return Err(CliError::Infeasible(
            numerics::Infeasibility::RateAboveBound {
                lambda_bar: params.lambda_bar,
                bound: b.upper,
                x: b.x,
            }
            .to_string(),
        ));
    }
    Ok(())
}

/// One row of `summary.csv`; `sweep.csv` starts with the same columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub config_id: String,
    pub policy: String,
    pub seed: u64,
    pub lambda_bar: f64,
    pub alpha_bar: f64,
    pub tau: f64,
    #[serde(rename = "N_E")]
    pub n_e: f64,
    pub avg_delay_s: f64,
    pub avg_queue: f64,
    #[serde(rename = "avg_power_W")]
    pub avg_power_w: f64,
    pub stability_verdict: String,
}

impl SummaryRow {
    fn new(config_id: &str, policy: PolicyKind, seed: u64, p: &SystemParams, m: &Metrics) -> Self {
        Self {
            config_id: config_id.into(),
            policy: policy.as_str().into(),
            seed,
            lambda_bar: p.lambda_bar,
            alpha_bar: p.alpha_bar,
            tau: p.tau,
            n_e: p.n_e,
            avg_delay_s: m.avg_delay,
            avg_queue: m.avg_queue,
            avg_power_w: m.avg_power,
            stability_verdict: m.stability_verdict.as_str().into(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
struct SweepRow {
    config_id: String,
    policy: String,
    seed: u64,
    lambda_bar: f64,
    alpha_bar: f64,
    tau: f64,
    #[serde(rename = "N_E")]
    n_e: f64,
    avg_delay_s: f64,
    avg_queue: f64,
    #[serde(rename = "avg_power_W")]
    avg_power_w: f64,
    stability_verdict: String,
    sweep_axis: String,
    sweep_value: f64,
    delay_mean: f64,
    delay_stderr: f64,
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(runtime)?;
    for r in rows {
        w.serialize(r).map_err(runtime)?;
    }
    w.flush().map_err(runtime)?;
    Ok(())
}

fn run_grid(
    cfg: &ExperimentConfig,
    pool: &rayon::ThreadPool,
) -> Result<Vec<(PolicyKind, u64, Metrics)>, CliError> {
    if cfg.sim.policies.contains(&PolicyKind::MdpTable) {
        return Err(CliError::Config(ConfigError::Invalid(
            "mdp_table runs need a solved table; use `compare`".into(),
        )));
    }
    let tasks: Vec<(PolicyKind, u64)> = cfg
        .sim
        .policies
        .iter()
        .flat_map(|&p| cfg.seeds().into_iter().map(move |s| (p, s)))
        .collect();
    pool.install(|| {
        tasks
            .par_iter()
            .map(|&(p, s)| sim::run_simulation(&cfg.sim_config(p, s)).map(|m| (p, s, m)))
            .collect::<Result<Vec<_>, _>>()
    })
    .map_err(CliError::from)
}

pub fn simulate(args: &CommonArgs) -> Result<(), CliError> {
    let cfg = load(args)?;
    check_feasible(&cfg.system)?;
    let dir = out_dir(args)?;
    let pool = pool(args)?;
    let results = run_grid(&cfg, &pool)?;
    let rows: Vec<SummaryRow> = results
        .iter()
        .map(|(p, s, m)| SummaryRow::new(&cfg.name, *p, *s, &cfg.system, m))
        .collect();
    write_csv(&dir.join("summary.csv"), &rows)?;
    if cfg.sim.trace {
        let (p, s) = (cfg.sim.policies[0], cfg.seeds()[0]);
        let sim_cfg = cfg.sim_config(p, s);
        let policy = policies::Policy::build(p, &cfg.system, &cfg.policy, None).map_err(SimError::from)?;
        let mut trace = Vec::new();
        sim::run_with_policy(&sim_cfg, policy, Some(&mut trace))?;
        write_csv(&dir.join("trace.csv"), &trace)?;
    }
    for r in &rows {
        println!(
            "{} {:<12} seed {:<6} delay {:.6} s  queue {:.6}  power {:.4} W  {}",
            r.config_id, r.policy, r.seed, r.avg_delay_s, r.avg_queue, r.avg_power_w, r.stability_verdict
        );
    }
    Ok(())
}

pub fn sweep(args: &CommonArgs) -> Result<(), CliError> {
    let cfg = load(args)?;
    let points = cfg.sweep_points()?;
    for (_, c) in &points {
        check_feasible(&c.system)?;
    }
    let dir = out_dir(args)?;
    let pool = pool(args)?;
    let mut rows = Vec::new();
    for (k, (value, c)) in points.iter().enumerate() {
        let id = format!("{}[{k}]", cfg.name);
        let results = run_grid(c, &pool)?;
        for &policy in &c.sim.policies {
            let delays: Vec<f64> = results
                .iter()
                .filter(|r| r.0 == policy)
                .map(|r| r.2.avg_delay)
                .collect();
            let (mean, se) = mean_stderr(&delays);
            for (p, s, m) in results.iter().filter(|r| r.0 == policy) {
                let base = SummaryRow::new(&id, *p, *s, &c.system, m);
                rows.push(SweepRow {
                    config_id: base.config_id,
                    policy: base.policy,
                    seed: base.seed,
                    lambda_bar: base.lambda_bar,
                    alpha_bar: base.alpha_bar,
                    tau: base.tau,
                    n_e: base.n_e,
                    avg_delay_s: base.avg_delay_s,
                    avg_queue: base.avg_queue,
                    avg_power_w: base.avg_power_w,
                    stability_verdict: base.stability_verdict,
                    sweep_axis: cfg.sweep.axis.clone(),
                    sweep_value: *value,
                    delay_mean: mean,
                    delay_stderr: se,
                });
            }
            println!("{id} {}={value:.6} {:<12} delay {mean:.6} +- {se:.6} s", cfg.sweep.axis, policy.as_str());
        }
    }
    write_csv(&dir.join("sweep.csv"), &rows)
}

const TABLE_FILE: &str = "mdp_table.csv";
const META_FILE: &str = "mdp_meta.toml";

pub fn solve_mdp(args: &CommonArgs) -> Result<(), CliError> {
    let cfg = load(args)?;
    let dir = out_dir(args)?;
    let kernel = mdp::build_kernel(&cfg.mdp_grid(), &cfg.system).map_err(|e| match e {
        MdpError::Grid(m) => CliError::Config(ConfigError::Invalid(m)),
        other => runtime(other),
    })?;
    let pool = pool(args)?;
    let sol = pool
        .install(|| mdp::relative_value_iteration(&kernel, &cfg.rvi_options()))
        .map_err(runtime)?;
    let file = fs::File::create(dir.join(TABLE_FILE)).map_err(runtime)?;
    sol.write_csv(&kernel, std::io::BufWriter::new(file)).map_err(runtime)?;
    let meta = MdpMeta {
        params: cfg.system,
        grid: cfg.mdp_grid(),
        theta_star: sol.theta_star,
        iterations: sol.iterations,
        span: sol.span,
    };
    fs::write(dir.join(META_FILE), toml::to_string(&meta).map_err(runtime)?).map_err(runtime)?;
    println!(
        "theta* = {:.9} s  iterations {}  span {:.3e}",
        sol.theta_star, sol.iterations, sol.span
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct CompareRow {
    config_id: String,
    policy: String,
    grid_cost: f64,
    via_cost: f64,
    loss_ratio: f64,
    boundary_mass: f64,
    note: String,
}

pub fn compare(args: &CommonArgs) -> Result<(), CliError> {
    let cfg = load(args)?;
    let dir = out_dir(args)?;
    let meta_text = fs::read_to_string(dir.join(META_FILE)).map_err(|e| {
        CliError::Mismatch(format!(
            "cannot read {} in {} ({e}); run solve-mdp first",
            META_FILE,
            dir.display()
        ))
    })?;
    let meta: MdpMeta =
        toml::from_str(&meta_text).map_err(|e| CliError::Mismatch(format!("unreadable {META_FILE}: {e}")))?;
    if meta.params != cfg.system {
        return Err(CliError::Mismatch(format!(
            "table solved for {:?}, config has {:?}",
            meta.params, cfg.system
        )));
    }
    if meta.grid != cfg.mdp_grid() {
        return Err(CliError::Mismatch(format!(
            "table solved on grid {:?}, config has {:?}",
            meta.grid,
            cfg.mdp_grid()
        )));
    }
    let kernel = mdp::build_kernel(&meta.grid, &meta.params).map_err(runtime)?;
    let file = fs::File::open(dir.join(TABLE_FILE))
        .map_err(|e| CliError::Mismatch(format!("cannot open {TABLE_FILE}: {e}")))?;
    let table = TablePolicy::from_csv(&kernel, std::io::BufReader::new(file))
        .map_err(|e| CliError::Mismatch(e.to_string()))?;
    let opts = cfg.rvi_options();
    let pool = pool(args)?;
    let via = pool
        .install(|| mdp::evaluate_policy_on_grid(&kernel, &GridPolicy { powers: table.powers().to_vec() }, &opts))
        .map_err(runtime)?;
    let mut rows = vec![CompareRow {
        config_id: cfg.name.clone(),
        policy: PolicyKind::MdpTable.as_str().into(),
        grid_cost: via.average_cost,
        via_cost: via.average_cost,
        loss_ratio: 0.0,
        boundary_mass: via.boundary_mass,
        note: via.warning.clone().unwrap_or_default(),
    }];
    let p = cfg.system;
    for &kind in cfg.sim.policies.iter().filter(|k| PolicyKind::BASELINE_SET.contains(k)) {
        let grid_policy = match kind {
            PolicyKind::ClosedForm => {
                let model = PriorityModel::new(&p)?;
                GridPolicy::from_fn(&kernel, |s| policies::power_closed_form(s, &model))
            }
            PolicyKind::Greedy => {
                let eps = cfg.policy.epsilon_frac * p.alpha_bar;
                GridPolicy::from_fn(&kernel, |s| policies::power_greedy(s, &p, eps).unwrap_or(0.0))
            }
            PolicyKind::CsiWf | PolicyKind::Qwwf => {
                // Multiplier trained online exactly as in the simulator.
                let m = sim::run_simulation(&cfg.sim_config(kind, cfg.sim.seed))?;
                let dual = DualState {
                    gamma: m.final_gamma.unwrap_or(1.0 / p.alpha_bar),
                    ..DualState::initial(p.alpha_bar, cfg.policy.epsilon_frac * p.alpha_bar, cfg.policy.a0)
                };
                if kind == PolicyKind::CsiWf {
                    GridPolicy::from_fn(&kernel, |s| policies::power_csi_wf(s, p.tau, &dual))
                } else {
                    GridPolicy::from_fn(&kernel, |s| policies::power_qwwf(s, p.tau, &dual))
                }
            }
            _ => unreachable!("filtered to baseline set"),
        };
        let row = match pool.install(|| mdp::evaluate_policy_on_grid(&kernel, &grid_policy, &opts)) {
            Ok(ev) => CompareRow {
                config_id: cfg.name.clone(),
                policy: kind.as_str().into(),
                grid_cost: ev.average_cost,
                via_cost: via.average_cost,
                loss_ratio: (ev.average_cost - via.average_cost) / via.average_cost,
                boundary_mass: ev.boundary_mass,
                note: ev.warning.unwrap_or_default(),
            },
            Err(e) => CompareRow {
                config_id: cfg.name.clone(),
                policy: kind.as_str().into(),
                grid_cost: f64::NAN,
                via_cost: via.average_cost,
                loss_ratio: f64::NAN,
                boundary_mass: f64::NAN,
                note: e.to_string(),
            },
        };
        println!(
            "{:<12} grid cost {:.6} s  via {:.6} s  loss ratio {:+.4}  {}",
            row.policy, row.grid_cost, row.via_cost, row.loss_ratio, row.note
        );
        rows.push(row);
    }
    write_csv(&dir.join("compare.csv"), &rows)
}

pub fn vcts(args: &CommonArgs) -> Result<(), CliError> {
    let cfg = load(args)?;
    let dir = out_dir(args)?;
    let v = cfg.vcts;
    let policy = match v.policy {
        VctsPolicyKind::WaterLevel => FluidPolicy::WaterLevel(PriorityModel::new(&cfg.system)?),
        VctsPolicyKind::Constant => FluidPolicy::ConstantPower { power: v.power },
        VctsPolicyKind::Threshold => FluidPolicy::threshold(v.power, v.on_above, v.off_below),
    };
    let traj = vcts::integrate_vcts(&cfg.system, &policy, v.q0, v.e0, v.horizon, v.dt).map_err(|e| match e {
        VctsError::Config(m) => CliError::Config(ConfigError::Invalid(m)),
        other => runtime(other),
    })?;
    let file = fs::File::create(dir.join("vcts.csv")).map_err(runtime)?;
    traj.write_csv(std::io::BufWriter::new(file)).map_err(runtime)?;
    let last = traj.len() - 1;
    println!(
        "total cost {:.6}  q(T) {:.6}  e(T) {:.6}  L(T) {:.6}  U(T) {:.6}",
        vcts::total_cost(&traj),
        traj.q[last],
        traj.e[last],
        traj.lower[last],
        traj.upper[last]
    );
    Ok(())
}

pub fn regimes(args: &CommonArgs) -> Result<(), CliError> {
    let cfg = load(args)?;
    let p = cfg.system;
    let regime = priority::classify_regime(&p);
    let bounds = RateBounds::for_alpha(p.alpha_bar).map_err(runtime)?;
    println!("regime = {regime}");
    println!("lambda_bar = {}", p.lambda_bar);
    println!("alpha_bar = {}", p.alpha_bar);
    println!("tau = {}", p.tau);
    println!("x = {:.10}", bounds.x);
    println!("E1(1/alpha_bar) = {:.10}", bounds.lower);
    println!("exp(1/x)E1(1/x) = {:.10}", bounds.upper);
    if regime == Regime::Infeasible {
        println!(
            "violated: lambda_bar = {} must be below exp(1/x)E1(1/x) = {:.10}",
            p.lambda_bar, bounds.upper
        );
    }
    if p.lambda_bar > 0.0 {
        match numerics::solve_e_threshold(p.lambda_bar, p.tau) {
            Ok(e_th) => println!("e_th = {e_th:.10}"),
            Err(e) => println!("e_th = unavailable ({e})"),
        }
    }
    let report = priority::stability_check(&p, &cfg.energy.pmf(p.alpha_bar))?;
    match report.e_star {
        Some(e) => println!("e_star = {e:.10}"),
        None => println!("e_star = none ({})", report.note.as_deref().unwrap_or("")),
    }
    let verdict = |ok: bool| if ok { "pass" } else { "fail" };
    println!(
        "stability.rate = {} (lambda_bar {} < E[exp(1/alpha)E1(1/alpha)] {:.10}, margin {:.10})",
        verdict(report.rate.holds),
        report.rate.lhs,
        report.rate.rhs,
        report.rate.margin
    );
    match report.storage {
        Some(s) => println!(
            "stability.storage = {} (N_E {} >= N*e_star {:.10}, margin {:.10})",
            verdict(s.holds),
            s.lhs,
            s.rhs,
            s.margin
        ),
        None => println!("stability.storage = fail (no steady energy level)"),
    }
    Ok(())
}
