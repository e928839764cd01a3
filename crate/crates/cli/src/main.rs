//! `skmlab`: run stochastic Krasnoselskii-Mann iterations, average-reward TD,
//! and their diagnostics from a TOML config, writing CSV plus a manifest
//! that reproduces the run.
//!
//! Exit codes: 0 success, 1 runtime or configuration error, 2 usage error,
//! 3 strict-mode check failure.

mod commands;
mod config;
mod csvout;
mod manifest;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

use config::{load_file, resolve, FileConfig, Overrides};

#[derive(Parser)]
#[command(name = "skmlab", version, about = "Stochastic Krasnoselskii-Mann iteration laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check chain identities (stationarity, deviation matrix, Poisson equation) on the configured chain
    VerifyPoisson(CommonArgs),
    /// Stream the six step-size series and report plateau diagnostics
    CheckSchedules(CheckSchedulesArgs),
    /// Run tabular average-reward TD and emit checkpoint metrics per replica
    RunTd(CommonArgs),
    /// Monte Carlo residual-rate sweep over seeded replicas
    RateSweep(CommonArgs),
    /// Run TD through the engine with the Poisson noise decomposition and emit the trace
    DecomposeNoise(CommonArgs),
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// TOML config file (sections: chain | mdp | schedule | run | sweep)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for CSV files and manifest.toml
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Exit with status 3 if any check flag fails
    #[arg(long)]
    strict: bool,
    /// Step-size exponent, in (0.8, 1]
    #[arg(long)]
    b: Option<f64>,
    /// Number of iteration steps (accepts forms like 1e6)
    #[arg(long, value_parser = parse_count)]
    horizon: Option<u64>,
    /// Base seed; replica i uses seed + i
    #[arg(long)]
    seed: Option<u64>,
    /// Replica count for run-td / decompose-noise
    #[arg(long)]
    replicas: Option<u32>,
    /// Generate a random ergodic MDP with this many states
    #[arg(long)]
    n_states: Option<usize>,
    /// Actions for the generated MDP
    #[arg(long)]
    n_actions: Option<usize>,
    /// Seed for the generated MDP
    #[arg(long)]
    mdp_seed: Option<u64>,
    /// Uniform-mixing weight of the generated MDP, in (0, 1]
    #[arg(long)]
    mixing: Option<f64>,
    /// Cap on concurrent replicas (0 = rayon default)
    #[arg(long)]
    threads: Option<usize>,
    /// Enable the Poisson noise decomposition where optional
    #[arg(long)]
    decomposition: bool,
}

#[derive(Args, Clone)]
struct CheckSchedulesArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Horizon alias used by the schedules diagnostics (accepts 1e6)
    #[arg(long, value_parser = parse_count)]
    n: Option<u64>,
    /// Plateau threshold as a fraction of the running total
    #[arg(long)]
    plateau_fraction: Option<f64>,
    /// Additionally stream a deliberately divergent exponent in (0, 1]
    #[arg(long)]
    counterexample_b: Option<f64>,
}

fn parse_count(s: &str) -> Result<u64, String> {
    if let Ok(v) = s.parse::<u64>() {
        return Ok(v);
    }
    let f: f64 = s.parse().map_err(|_| format!("not a count: {s}"))?;
    if f.fract() == 0.0 && f >= 0.0 && f <= u64::MAX as f64 {
        Ok(f as u64)
    } else {
        Err(format!("not a nonnegative integer count: {s}"))
    }
}

fn overrides_of(args: &CommonArgs) -> Overrides {
    Overrides {
        b: args.b,
        horizon: args.horizon,
        seed: args.seed,
        replicas: args.replicas,
        n_states: args.n_states,
        n_actions: args.n_actions,
        mdp_seed: args.mdp_seed,
        mixing: args.mixing,
        threads: args.threads,
        decomposition: args.decomposition.then_some(true),
    }
}

fn run(cli: Cli) -> Result<commands::Outcome> {
    let (common, command_args) = match &cli.command {
        Command::VerifyPoisson(a)
        | Command::RunTd(a)
        | Command::RateSweep(a)
        | Command::DecomposeNoise(a) => (a.clone(), None),
        Command::CheckSchedules(a) => (a.common.clone(), Some(a.clone())),
    };
    let file = match &common.config {
        Some(path) => load_file(path)?,
        None => FileConfig::default(),
    };
    let resolved = resolve(file, &overrides_of(&common))?;
    if resolved.run.threads > 0 {
        // First build wins; later attempts (e.g. in tests) are harmless.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(resolved.run.threads)
            .build_global();
    }
    match cli.command {
        Command::VerifyPoisson(_) => {
            commands::verify_poisson(&resolved, &common.out, common.strict)
        }
        Command::CheckSchedules(_) => {
            let args = command_args.expect("check-schedules args");
            let mut resolved = resolved;
            if let Some(n) = args.n {
                resolved.run.horizon = n;
            }
            commands::check_schedules(
                &resolved,
                &common.out,
                common.strict,
                args.plateau_fraction,
                args.counterexample_b,
            )
        }
        Command::RunTd(_) => commands::run_td_command(&resolved, &common.out, common.strict),
        Command::RateSweep(_) => commands::rate_sweep(&resolved, &common.out, common.strict),
        Command::DecomposeNoise(_) => {
            commands::decompose_noise(&resolved, &common.out, common.strict)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(outcome) if outcome.strict_failed => ExitCode::from(3),
        Ok(_) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}
