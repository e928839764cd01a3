//! Subcommand implementations. Each resolves its configuration, runs the
//! core machinery, writes CSV output plus a manifest, and reports whether
//! any strict-mode flag failed.

use anyhow::{anyhow, bail, Result};
use rand::RngExt;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

use skmlab_core::engine::SkmRunConfig;
use skmlab_core::experiments::{monte_carlo_residuals, rate_table, Scenario, SweepConfig};
use skmlab_core::linalg::Matrix;
use skmlab_core::markov::{deviation_residuals, poisson_residual, ChainState, FiniteChain};
use skmlab_core::schedules::{series_diagnostics, StepSchedule, DEFAULT_PLATEAU_FRACTION};
use skmlab_core::td::{run_td, run_td_decomposed, AugmentedChain, TdRunConfig};

use crate::config::{build_chain, build_mdp, build_oracle, ResolvedConfig};
use crate::csvout::{num, opt, CsvFile};
use crate::manifest::RunManifest;

/// Identity tolerance reported by `verify-poisson`.
const IDENTITY_TOL: f64 = 1e-10;

pub struct Outcome {
    pub strict_failed: bool,
}

fn write_manifest(
    subcommand: &str,
    config: &ResolvedConfig,
    outputs: Vec<String>,
    dir: &Path,
) -> Result<()> {
    RunManifest::new(subcommand, config.clone(), outputs).write(dir)
}

/// Builds the configured chain: explicit `[chain]` rows, or the chain
/// induced by the configured MDP and policy.
fn configured_chain(config: &ResolvedConfig) -> Result<FiniteChain> {
    if let Some(section) = &config.chain {
        return build_chain(section);
    }
    if let Some(mdp_section) = &config.mdp {
        let (mdp, policy) = build_mdp(mdp_section)?;
        let oracle = build_oracle(&mdp, &policy)?;
        return Ok(oracle.chain().clone());
    }
    bail!("config needs a [chain] section or an [mdp] section")
}

pub fn verify_poisson(config: &ResolvedConfig, out: &Path, strict: bool) -> Result<Outcome> {
    let chain = configured_chain(config)?;
    let n = chain.n_states();

    let d = chain.stationary();
    let dp = chain.transition().vecmat(d);
    let stationary_residual =
        dp.iter().zip(d).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    let stationary_sum = (d.iter().sum::<f64>() - 1.0).abs();
    let (deviation_identity, deviation_nullspace) = deviation_residuals(&chain);

    let mut rng = ChaCha8Rng::seed_from_u64(config.run.seed);
    let mut poisson_max = 0.0f64;
    for _ in 0..100 {
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..3).map(|_| rng.random::<f64>() * 6.0 - 3.0).collect())
            .collect();
        let table = Matrix::from_rows(&rows).map_err(|e| anyhow!("{e}"))?;
        poisson_max = poisson_max.max(poisson_residual(&chain, &table).map_err(|e| anyhow!("{e}"))?);
    }

    let mut walk_a = ChainState::new(0, config.run.seed);
    let mut walk_b = ChainState::new(0, config.run.seed);
    let reproducible = (0..1_000)
        .all(|_| chain.sample_step(&mut walk_a) == chain.sample_step(&mut walk_b));

    let mut csv = CsvFile::create(out, "identities.csv", "check,value,tolerance,pass")?;
    let mut all_pass = true;
    let mut worst = 0.0f64;
    for (name, value) in [
        ("stationary_residual", stationary_residual),
        ("stationary_sum", stationary_sum),
        ("deviation_identity", deviation_identity),
        ("deviation_nullspace", deviation_nullspace),
        ("poisson_residual_max", poisson_max),
    ] {
        let pass = value < IDENTITY_TOL;
        all_pass &= pass;
        worst = worst.max(value);
        csv.row(&[name.into(), num(value), num(IDENTITY_TOL), pass.to_string()]);
    }
    all_pass &= reproducible;
    csv.row(&[
        "sampling_reproducible".into(),
        if reproducible { "1".into() } else { "0".into() },
        "1".into(),
        reproducible.to_string(),
    ]);
    let path = csv.finish()?;

    write_manifest(
        "verify-poisson",
        config,
        vec![path.file_name().unwrap().to_string_lossy().into_owned()],
        out,
    )?;
    println!(
        "verify-poisson: {n}-state chain, max identity residual {worst:.3e} (tolerance {IDENTITY_TOL:.0e}), sampling reproducible: {reproducible}"
    );
    Ok(Outcome { strict_failed: strict && !all_pass })
}

pub fn check_schedules(
    config: &ResolvedConfig,
    out: &Path,
    strict: bool,
    plateau_fraction: Option<f64>,
    counterexample_b: Option<f64>,
) -> Result<Outcome> {
    let fraction = plateau_fraction.unwrap_or(DEFAULT_PLATEAU_FRACTION);
    let horizon = config.run.horizon.max(1_000);
    let mut outputs = Vec::new();
    let mut any_unbounded = false;

    let mut runs = vec![(StepSchedule::primary(config.schedule.b)
        .map_err(|e| anyhow!("{e}"))?, config.schedule.b, true)];
    if let Some(cb) = counterexample_b {
        let schedule = StepSchedule::diagnostic(cb)
            .map_err(|e| anyhow!("--counterexample-b: {e}"))?;
        runs.push((schedule, cb, false));
    }

    for (schedule, b, counts_for_strict) in runs {
        let diag = series_diagnostics(schedule, horizon, fraction).map_err(|e| anyhow!("{e}"))?;
        let name = format!("series_b{b}.csv");
        let mut csv = CsvFile::create(out, &name, "series_id,n,partial_sum")?;
        for series in &diag.series {
            for &(n, sum) in &series.checkpoints {
                csv.row(&[series.id.into(), n.to_string(), num(sum)]);
            }
        }
        outputs.push(csv.finish()?.file_name().unwrap().to_string_lossy().into_owned());
        for series in &diag.series {
            let frac = 100.0 * series.last_decade_increment / series.total;
            println!(
                "check-schedules b={b}: {} total {:.6} last-decade +{:.3}% -> {}",
                series.id,
                series.total,
                frac,
                if series.bounded { "bounded" } else { "not bounded" }
            );
            if counts_for_strict && !series.bounded {
                any_unbounded = true;
            }
        }
    }

    write_manifest("check-schedules", config, outputs, out)?;
    Ok(Outcome { strict_failed: strict && any_unbounded })
}

pub fn run_td_command(config: &ResolvedConfig, out: &Path, _strict: bool) -> Result<Outcome> {
    let mdp_section = config
        .mdp
        .as_ref()
        .ok_or_else(|| anyhow!("run-td needs an [mdp] section"))?;
    let (mdp, policy) = build_mdp(mdp_section)?;
    let oracle = build_oracle(&mdp, &policy)?;

    let mut csv = CsvFile::create(
        out,
        "td.csv",
        "replica,t,tau_t,bellman_residual,dist_V_star,abs_J_err,operator_residual",
    )?;
    for replica in 0..config.run.replicas {
        let mut run_config =
            TdRunConfig::new(config.schedule.b, config.run.horizon, config.run.seed + replica as u64)
                .map_err(|e| anyhow!("{e}"))?;
        run_config.checkpoints = skmlab_core::engine::geometric_checkpoints(
            config.run.checkpoint_start,
            config.run.checkpoint_ratio,
            config.run.horizon,
        );
        let traj = run_td(&mdp, &policy, &oracle, &run_config).map_err(|e| anyhow!("{e}"))?;
        for row in &traj.rows {
            csv.row(&[
                replica.to_string(),
                row.t.to_string(),
                num(row.tau),
                num(row.bellman_residual),
                num(row.dist_fixed_set),
                num(row.abs_gain_err),
                num(row.operator_residual),
            ]);
        }
        if replica == 0 {
            let last = traj.rows.last();
            if let Some(last) = last {
                println!(
                    "run-td: replica 0 final t={} dist_V*={:.4e} |J-err|={:.4e}",
                    last.t, last.dist_fixed_set, last.abs_gain_err
                );
            }
        }
    }
    let path = csv.finish()?;
    write_manifest(
        "run-td",
        config,
        vec![path.file_name().unwrap().to_string_lossy().into_owned()],
        out,
    )?;
    Ok(Outcome { strict_failed: false })
}

pub fn rate_sweep(config: &ResolvedConfig, out: &Path, strict: bool) -> Result<Outcome> {
    let mdp_section = config
        .mdp
        .as_ref()
        .ok_or_else(|| anyhow!("rate-sweep needs an [mdp] section"))?;
    let (mdp, policy) = build_mdp(mdp_section)?;
    let scenario = Scenario::td(mdp, policy).map_err(|e| anyhow!("{e}"))?;

    let mut sweep_config =
        SweepConfig::new(config.sweep.replicas, config.run.horizon, config.schedule.b, config.run.seed)
            .map_err(|e| anyhow!("{e}"))?;
    sweep_config.checkpoint_start = config.run.checkpoint_start;
    sweep_config.checkpoint_ratio = config.run.checkpoint_ratio;
    sweep_config.tail_fraction = config.sweep.tail_fraction;
    sweep_config.norm = config.run.norm();

    let report = monte_carlo_residuals(&scenario, &sweep_config).map_err(|e| anyhow!("{e}"))?;
    let surrogate = rate_table(config.schedule.b, &sweep_config.checkpoints())
        .map_err(|e| anyhow!("{e}"))?;

    let mut csv = CsvFile::create(
        out,
        "sweep.csv",
        "n,tau_n,mean_residual,std_residual,count,mean_gain_sq,std_gain_sq,surrogate",
    )?;
    for (i, row) in report.residual.rows.iter().enumerate() {
        let (gain_mean, gain_std) = report
            .gain_sq
            .as_ref()
            .map(|g| (Some(g.rows[i].mean), Some(g.rows[i].std)))
            .unwrap_or((None, None));
        csv.row(&[
            row.n.to_string(),
            num(row.tau),
            num(row.mean),
            num(row.std),
            row.count.to_string(),
            opt(gain_mean),
            opt(gain_std),
            num(surrogate.rows[i].2),
        ]);
    }
    let path = csv.finish()?;

    let [slope_lo, slope_hi] = config.sweep.slope_band;
    let slope = report.residual.tail_slope;
    let slope_ok = slope >= slope_lo && slope <= slope_hi;
    let ratio = report.residual.tail_sup_ratio;
    let sup_ok = ratio <= config.sweep.sup_ratio_limit;
    let (gain_slope, gain_ok) = match &report.gain_sq {
        Some(g) => {
            let [lo, hi] = config.sweep.gain_slope_band;
            (Some(g.tail_slope), g.tail_slope >= lo && g.tail_slope <= hi)
        }
        None => (None, true),
    };
    println!(
        "rate-sweep: residual slope vs tau = {slope:.3} in [{slope_lo}, {slope_hi}]: {slope_ok}; sup(mean*sqrt(tau)) tail ratio = {ratio:.3} <= {}: {sup_ok}; gain slope vs t = {}: {gain_ok}; envelope order {}",
        config.sweep.sup_ratio_limit,
        gain_slope.map(|s| format!("{s:.3}")).unwrap_or_else(|| "n/a".into()),
        surrogate.order,
    );

    write_manifest(
        "rate-sweep",
        config,
        vec![path.file_name().unwrap().to_string_lossy().into_owned()],
        out,
    )?;
    Ok(Outcome { strict_failed: strict && !(slope_ok && sup_ok && gain_ok) })
}

pub fn decompose_noise(config: &ResolvedConfig, out: &Path, _strict: bool) -> Result<Outcome> {
    let mdp_section = config
        .mdp
        .as_ref()
        .ok_or_else(|| anyhow!("decompose-noise needs an [mdp] section"))?;
    let (mdp, policy) = build_mdp(mdp_section)?;
    let oracle = build_oracle(&mdp, &policy)?;
    let augmented = AugmentedChain::new(&mdp, &policy, &oracle).map_err(|e| anyhow!("{e}"))?;

    let mut csv = CsvFile::create(
        out,
        "decomposition.csv",
        "replica,n,tau_n,residual,norm_U,norm_M,norm_e1,norm_e2,norm_e3",
    )?;
    let mut final_us = Vec::new();
    for replica in 0..config.run.replicas {
        let mut run_config =
            SkmRunConfig::new(config.run.horizon, config.schedule.b, config.run.seed + replica as u64)
                .map_err(|e| anyhow!("{e}"))?;
        run_config.checkpoints = skmlab_core::engine::geometric_checkpoints(
            config.run.checkpoint_start,
            config.run.checkpoint_ratio,
            config.run.horizon,
        );
        run_config.norm = config.run.norm();
        run_config.decomposition = true;
        let record = run_td_decomposed(&mdp, &policy, &oracle, &augmented, &run_config)
            .map_err(|e| anyhow!("{e}"))?;
        for row in &record.checkpoints {
            csv.row(&[
                replica.to_string(),
                row.n.to_string(),
                num(row.tau),
                num(row.residual),
                opt(row.norm_u),
                opt(row.norm_m),
                opt(row.norm_e1),
                opt(row.norm_e2),
                opt(row.norm_e3),
            ]);
        }
        if let Some(last) = record.checkpoints.last() {
            final_us.push(last.norm_u.unwrap_or(0.0));
        }
    }
    let path = csv.finish()?;
    let mut sorted = final_us.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite norms"));
    let median = if sorted.is_empty() {
        0.0
    } else {
        sorted[sorted.len() / 2]
    };
    println!(
        "decompose-noise: {} replicas over {} triples, median final ||U||={median:.4e}",
        config.run.replicas,
        augmented.len()
    );
    write_manifest(
        "decompose-noise",
        config,
        vec![path.file_name().unwrap().to_string_lossy().into_owned()],
        out,
    )?;
    Ok(Outcome { strict_failed: false })
}
