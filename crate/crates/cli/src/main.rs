//! `ehopt`: batch front-end for simulations, sweeps, oracle solves, fluid
//! traces and regime reports.
//!
//! Exit codes: 0 ok, 1 runtime failure, 2 configuration error, 3 infeasible
//! parameters, 4 artifact mismatch.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "ehopt", version, about = "Delay-optimal power control for energy-harvesting links")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct CommonArgs {
    /// TOML experiment file.
    #[arg(long)]
    pub config: PathBuf,
    /// Override a setting, e.g. `--set system.lambda_bar=1.82`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads for independent runs.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Base seed (replaces sim.seed).
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate every configured policy and seed; writes summary.csv.
    Simulate(CommonArgs),
    /// Simulate over the [sweep] grid; writes sweep.csv.
    Sweep(CommonArgs),
    /// Solve the grid MDP; writes mdp_table.csv and mdp_meta.toml.
    #[command(name = "solve-mdp")]
    SolveMdp(CommonArgs),
    /// Loss ratios against a solved table in the output directory; writes compare.csv.
    Compare(CommonArgs),
    /// Integrate the fluid model; writes vcts.csv.
    Vcts(CommonArgs),
    /// Print regime, thresholds and stability margins.
    Regimes(CommonArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate(a) => commands::simulate(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::SolveMdp(a) => commands::solve_mdp(a),
        Command::Compare(a) => commands::compare(a),
        Command::Vcts(a) => commands::vcts(a),
        Command::Regimes(a) => commands::regimes(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}
