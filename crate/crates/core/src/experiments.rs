//! Monte Carlo harnesses over seeded replicas.
//!
//! Replicas run independently (seed_i = base_seed + i, embarrassingly
//! parallel) and are reduced in replica order afterwards, so aggregates are
//! bit-identical no matter how the work was scheduled.
//!
//! [`monte_carlo_residuals`] averages fixed-point residuals per checkpoint
//! and fits a log-log slope of the mean residual against the step-size clock
//! `tau_n` over a tail window; the theoretical envelope decays like
//! `1/sqrt(tau_n)`. [`u_n_diagnostic`] tracks the aggregate-noise recursion
//! `U_n` and flags whether its median has collapsed by the end of the run.

use rayon::prelude::*;
use std::sync::Arc;
use thiserror::Error;

use crate::engine::{self, Norm, SkmOperator, SkmRunConfig, ZeroNoise};
use crate::markov::FiniteChain;
use crate::mdp::{EvalOracle, MdpError, PolicySpec, TabularMdp};
use crate::schedules::{alpha, ScheduleError, StepSchedule};
use crate::td::{self, AugmentedChain, TdError, TdRunConfig};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExperimentError {
    #[error("replica {replica} failed: {message}")]
    ReplicaFailed { replica: u32, message: String },
    #[error("sweep needs at least one replica")]
    NoReplicas,
    #[error("tail window holds {got} checkpoints, slope fit needs at least {min}")]
    TailTooShort { min: usize, got: usize },
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error(transparent)]
    Td(#[from] TdError),
}

/// What a sweep runs per replica: a generic operator driven by a chain, or
/// tabular TD on an MDP under a policy.
#[derive(Clone)]
pub enum Scenario {
    Operator { op: Arc<dyn SkmOperator + Send + Sync>, chain: Arc<FiniteChain> },
    MdpPolicy { mdp: Arc<TabularMdp>, policy: Arc<PolicySpec>, oracle: Arc<EvalOracle> },
}

impl Scenario {
    pub fn td(mdp: TabularMdp, policy: PolicySpec) -> Result<Self, ExperimentError> {
        let oracle = EvalOracle::new(&mdp, &policy)?;
        Ok(Self::MdpPolicy {
            mdp: Arc::new(mdp),
            policy: Arc::new(policy),
            oracle: Arc::new(oracle),
        })
    }
}

#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub replicas: u32,
    pub horizon: u64,
    pub b: f64,
    pub base_seed: u64,
    /// Geometric checkpoint grid parameters.
    pub checkpoint_start: u64,
    pub checkpoint_ratio: u64,
    /// Tail window for slope fitting: checkpoints with `n >= horizon * tail_fraction`.
    pub tail_fraction: f64,
    pub norm: Norm,
    /// Initial iterate for every replica (zero when absent).
    pub x0: Option<Vec<f64>>,
}

impl SweepConfig {
    pub fn new(replicas: u32, horizon: u64, b: f64, base_seed: u64) -> Result<Self, ExperimentError> {
        StepSchedule::primary(b)?;
        if replicas == 0 {
            return Err(ExperimentError::NoReplicas);
        }
        Ok(Self {
            replicas,
            horizon,
            b,
            base_seed,
            checkpoint_start: 16,
            checkpoint_ratio: 2,
            tail_fraction: 0.1,
            norm: Norm::Sup,
            x0: None,
        })
    }

    pub fn checkpoints(&self) -> Vec<u64> {
        engine::geometric_checkpoints(self.checkpoint_start, self.checkpoint_ratio, self.horizon)
    }
}

/// Per-checkpoint aggregate of one metric across replicas.
#[derive(Debug, Clone, PartialEq)]
pub struct RateRow {
    pub n: u64,
    pub tau: f64,
    pub mean: f64,
    pub std: f64,
    pub count: u32,
}

#[derive(Debug, Clone)]
pub struct RateReport {
    pub rows: Vec<RateRow>,
    /// Least-squares slope of `ln mean` against `ln tau` over the tail window.
    pub tail_slope: f64,
    /// Number of checkpoints in the tail window (>= 4 by construction).
    pub tail_len: usize,
    /// `max_n mean_n * sqrt(tau_n)` over all checkpoints.
    pub sup_mean_sqrt_tau: f64,
    /// Ratio of the tail-window max of `mean * sqrt(tau)` to its value at
    /// the start of the tail window.
    pub tail_sup_ratio: f64,
}

/// Aggregates a per-replica matrix of metric values (replica-major) into
/// per-checkpoint mean/std rows. Input order does not matter: rows are
/// reduced in replica-id order.
fn aggregate(
    grid: &[(u64, f64)],
    mut per_replica: Vec<(u32, Vec<f64>)>,
) -> Vec<RateRow> {
    per_replica.sort_by_key(|(id, _)| *id);
    let r = per_replica.len() as f64;
    grid.iter()
        .enumerate()
        .map(|(i, &(n, tau))| {
            let first = per_replica[0].1[i];
            let identical = per_replica.iter().all(|(_, vals)| vals[i] == first);
            let mean = if identical {
                first
            } else {
                per_replica.iter().map(|(_, vals)| vals[i]).sum::<f64>() / r
            };
            // Zero exactly when every replica produced the same value.
            let var = if identical || per_replica.len() < 2 {
                0.0
            } else {
                per_replica.iter().map(|(_, vals)| (vals[i] - mean).powi(2)).sum::<f64>()
                    / (r - 1.0)
            };
            RateRow { n, tau, mean, std: var.sqrt(), count: per_replica.len() as u32 }
        })
        .collect()
}

/// Least-squares slope of `ln y` on `ln x`.
fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (mut sx, mut sy) = (0.0, 0.0);
    for &(x, y) in points {
        sx += x.ln();
        sy += y.ln();
    }
    let (mx, my) = (sx / n, sy / n);
    let mut num = 0.0;
    let mut den = 0.0;
    for &(x, y) in points {
        num += (x.ln() - mx) * (y.ln() - my);
        den += (x.ln() - mx) * (x.ln() - mx);
    }
    num / den
}

fn finish_report(
    grid: &[(u64, f64)],
    per_replica: Vec<(u32, Vec<f64>)>,
    horizon: u64,
    tail_fraction: f64,
    vs_tau: bool,
) -> Result<RateReport, ExperimentError> {
    let rows = aggregate(grid, per_replica);
    let tail_start = (horizon as f64 * tail_fraction) as u64;
    let mut tail: Vec<RateRow> =
        rows.iter().filter(|r| r.n >= tail_start).cloned().collect();
    // The fit needs at least 4 points; widen the window with the latest
    // earlier checkpoints if the grid is too coarse.
    if tail.len() < 4 {
        let mut extra: Vec<RateRow> =
            rows.iter().filter(|r| r.n < tail_start).rev().take(4 - tail.len()).cloned().collect();
        extra.reverse();
        extra.extend(tail);
        tail = extra;
    }
    if tail.len() < 4 {
        return Err(ExperimentError::TailTooShort { min: 4, got: tail.len() });
    }
    let points: Vec<(f64, f64)> = tail
        .iter()
        .map(|r| (if vs_tau { r.tau } else { r.n as f64 }, r.mean.max(f64::MIN_POSITIVE)))
        .collect();
    let tail_slope = loglog_slope(&points);
    let sup_mean_sqrt_tau =
        rows.iter().map(|r| r.mean * r.tau.sqrt()).fold(0.0f64, f64::max);
    let tail_first = tail[0].mean * tail[0].tau.sqrt();
    let tail_sup =
        tail.iter().map(|r| r.mean * r.tau.sqrt()).fold(0.0f64, f64::max);
    let tail_sup_ratio = if tail_first > 0.0 { tail_sup / tail_first } else { 1.0 };
    Ok(RateReport { rows, tail_slope, tail_len: tail.len(), sup_mean_sqrt_tau, tail_sup_ratio })
}

/// The residual sweep plus, for TD scenarios, the squared gain-error sweep
/// (whose slope is fitted against `ln t` rather than `ln tau`).
#[derive(Debug, Clone)]
pub struct SweepReport {
    pub residual: RateReport,
    pub gain_sq: Option<RateReport>,
}

/// Residuals for one replica, with the squared gain errors when the
/// scenario tracks a gain estimator.
type ReplicaSeries = (u32, Vec<f64>, Option<Vec<f64>>);

/// Runs `config.replicas` independently seeded trajectories and aggregates
/// fixed-point residuals per checkpoint.
pub fn monte_carlo_residuals(
    scenario: &Scenario,
    config: &SweepConfig,
) -> Result<SweepReport, ExperimentError> {
    let checkpoints = config.checkpoints();
    let results: Vec<Result<ReplicaSeries, ExperimentError>> = (0..config
        .replicas)
        .into_par_iter()
        .map(|replica| {
            let seed = config.base_seed + replica as u64;
            match scenario {
                Scenario::Operator { op, chain } => {
                    let mut run_config =
                        SkmRunConfig::new(config.horizon, config.b, seed).map_err(|e| {
                            ExperimentError::ReplicaFailed { replica, message: e.to_string() }
                        })?;
                    run_config.checkpoints = checkpoints.clone();
                    run_config.norm = config.norm;
                    run_config.x0 = config.x0.clone();
                    let record = engine::run(op.as_ref(), chain, &mut ZeroNoise, &run_config)
                        .map_err(|e| ExperimentError::ReplicaFailed {
                            replica,
                            message: e.to_string(),
                        })?;
                    let residuals = record.checkpoints.iter().map(|c| c.residual).collect();
                    Ok((replica, residuals, None))
                }
                Scenario::MdpPolicy { mdp, policy, oracle } => {
                    let mut run_config = TdRunConfig::new(config.b, config.horizon, seed)
                        .map_err(|e| ExperimentError::ReplicaFailed {
                            replica,
                            message: e.to_string(),
                        })?;
                    run_config.checkpoints = checkpoints.clone();
                    run_config.v0 = config.x0.clone();
                    let traj =
                        td::run_td(mdp, policy, oracle, &run_config).map_err(|e| {
                            ExperimentError::ReplicaFailed { replica, message: e.to_string() }
                        })?;
                    let residuals = traj.rows.iter().map(|r| r.operator_residual).collect();
                    let gain_sq =
                        traj.rows.iter().map(|r| r.abs_gain_err * r.abs_gain_err).collect();
                    Ok((replica, residuals, Some(gain_sq)))
                }
            }
        })
        .collect();

    let mut residual_rows = Vec::with_capacity(results.len());
    let mut gain_rows = Vec::with_capacity(results.len());
    for result in results {
        let (replica, residuals, gain_sq) = result?;
        residual_rows.push((replica, residuals));
        if let Some(g) = gain_sq {
            gain_rows.push((replica, g));
        }
    }

    let grid = grid_with_tau(&checkpoints, config.b);
    let residual =
        finish_report(&grid, residual_rows, config.horizon, config.tail_fraction, true)?;
    let gain_sq = if gain_rows.is_empty() {
        None
    } else {
        Some(finish_report(&grid, gain_rows, config.horizon, config.tail_fraction, false)?)
    };
    Ok(SweepReport { residual, gain_sq })
}

/// Runs the same scenario once per exponent, reusing everything else from
/// `config`.
pub fn monte_carlo_residuals_over(
    scenario: &Scenario,
    config: &SweepConfig,
    exponents: &[f64],
) -> Result<Vec<(f64, SweepReport)>, ExperimentError> {
    exponents
        .iter()
        .map(|&b| {
            let mut per_b = config.clone();
            StepSchedule::primary(b)?;
            per_b.b = b;
            Ok((b, monte_carlo_residuals(scenario, &per_b)?))
        })
        .collect()
}

fn grid_with_tau(checkpoints: &[u64], b: f64) -> Vec<(u64, f64)> {
    let mut out = Vec::with_capacity(checkpoints.len());
    let mut tau = 0.0;
    let mut next = checkpoints.iter().copied().peekable();
    let horizon = checkpoints.last().copied().unwrap_or(0);
    for n in 1..=horizon {
        let a = alpha(n, b);
        tau += a * (1.0 - a);
        if next.peek() == Some(&n) {
            next.next();
            out.push((n, tau));
        }
    }
    out
}

/// The theoretical decay surrogate `1/sqrt(tau_n)` on a checkpoint grid,
/// with a plain-text description of its order in `n`.
#[derive(Debug, Clone)]
pub struct RateTable {
    pub rows: Vec<(u64, f64, f64)>,
    pub order: String,
}

pub fn rate_table(b: f64, checkpoints: &[u64]) -> Result<RateTable, ExperimentError> {
    StepSchedule::diagnostic(b)?;
    let rows = grid_with_tau(checkpoints, b)
        .into_iter()
        .map(|(n, tau)| (n, tau, 1.0 / tau.sqrt()))
        .collect();
    let order = if b < 1.0 {
        format!("n^(-{:.3})", (1.0 - b) / 2.0)
    } else {
        "1/sqrt(log n)".to_string()
    };
    Ok(RateTable { rows, order })
}

/// Per-checkpoint spread of `||U_n||` across replicas.
#[derive(Debug, Clone, PartialEq)]
pub struct URow {
    pub n: u64,
    pub tau: f64,
    pub median: f64,
    pub max: f64,
}

#[derive(Debug, Clone)]
pub struct UReport {
    pub rows: Vec<URow>,
    pub peak_median: f64,
    pub final_median: f64,
    /// `final_median <= peak_median / 10`.
    pub pass: bool,
}

fn median_of(mut values: Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("norms are finite"));
    let m = values.len();
    if m % 2 == 1 {
        values[m / 2]
    } else {
        0.5 * (values[m / 2 - 1] + values[m / 2])
    }
}

/// Runs the scenario with the Poisson decomposition enabled and aggregates
/// `||U_n||` medians and maxima per checkpoint. Passes when the final median
/// has fallen to a tenth of its peak.
pub fn u_n_diagnostic(
    scenario: &Scenario,
    config: &SweepConfig,
) -> Result<UReport, ExperimentError> {
    let checkpoints = config.checkpoints();
    let augmented = match scenario {
        Scenario::MdpPolicy { mdp, policy, oracle } => {
            Some(Arc::new(AugmentedChain::new(mdp, policy, oracle)?))
        }
        Scenario::Operator { .. } => None,
    };
    let results: Vec<Result<(u32, Vec<f64>), ExperimentError>> = (0..config.replicas)
        .into_par_iter()
        .map(|replica| {
            let seed = config.base_seed + replica as u64;
            let mut run_config = SkmRunConfig::new(config.horizon, config.b, seed)
                .map_err(|e| ExperimentError::ReplicaFailed { replica, message: e.to_string() })?;
            run_config.checkpoints = checkpoints.clone();
            run_config.norm = config.norm;
            run_config.decomposition = true;
            let record = match scenario {
                Scenario::Operator { op, chain } => {
                    engine::run(op.as_ref(), chain, &mut ZeroNoise, &run_config)
                }
                Scenario::MdpPolicy { mdp, policy, oracle } => td::run_td_decomposed(
                    mdp,
                    policy,
                    oracle,
                    augmented.as_ref().expect("augmented chain built for TD"),
                    &run_config,
                )
                .map_err(|e| match e {
                    TdError::Engine(inner) => inner,
                    other => engine::EngineError::InvalidConfig { context: other.to_string() },
                }),
            }
            .map_err(|e| ExperimentError::ReplicaFailed { replica, message: e.to_string() })?;
            let norms = record
                .checkpoints
                .iter()
                .map(|c| c.norm_u.expect("decomposition enabled"))
                .collect();
            Ok((replica, norms))
        })
        .collect();

    let mut per_replica: Vec<(u32, Vec<f64>)> = Vec::with_capacity(results.len());
    for result in results {
        per_replica.push(result?);
    }
    per_replica.sort_by_key(|(id, _)| *id);

    let grid = grid_with_tau(&checkpoints, config.b);
    let rows: Vec<URow> = grid
        .iter()
        .enumerate()
        .map(|(i, &(n, tau))| {
            let values: Vec<f64> = per_replica.iter().map(|(_, v)| v[i]).collect();
            let max = values.iter().copied().fold(0.0f64, f64::max);
            URow { n, tau, median: median_of(values), max }
        })
        .collect();
    let peak_median = rows.iter().map(|r| r.median).fold(0.0f64, f64::max);
    let final_median = rows.last().map_or(0.0, |r| r.median);
    Ok(UReport { rows, peak_median, final_median, pass: final_median <= peak_median / 10.0 })
}
