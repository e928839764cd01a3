//! Configuration schema and validation.
//!
//! One flat TOML file with explicit sections — `[chain]`, `[mdp]`,
//! `[schedule]`, `[run]`, `[sweep]` — or the equivalent command-line flags
//! for the generated-MDP path. Parsing materializes every default into a
//! [`ResolvedConfig`] so the manifest written next to each output is enough
//! to reproduce the run exactly.

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

use skmlab_core::engine::Norm;
use skmlab_core::markov::FiniteChain;
use skmlab_core::mdp::{EvalOracle, PolicySpec, TabularMdp};
use skmlab_core::schedules::StepSchedule;

/// Raw file schema; every field optional so defaults can be materialized.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub chain: Option<ChainSection>,
    pub mdp: Option<MdpSection>,
    pub schedule: Option<ScheduleSection>,
    pub run: Option<RunSection>,
    pub sweep: Option<SweepSection>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ChainSection {
    /// Row-major transition probabilities.
    pub rows: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MdpSection {
    /// `rewards[s][a]`
    pub rewards: Option<Vec<Vec<f64>>>,
    /// `transitions[s][a][s']`
    pub transitions: Option<Vec<Vec<Vec<f64>>>>,
    pub p0: Option<Vec<f64>>,
    /// `policy[s][a]`; uniform when absent.
    pub policy: Option<Vec<Vec<f64>>>,
    pub generate: Option<GenerateSection>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateSection {
    pub n_states: usize,
    #[serde(default = "default_n_actions")]
    pub n_actions: usize,
    pub seed: u64,
    #[serde(default = "default_mixing")]
    pub mixing: f64,
}

fn default_n_actions() -> usize {
    2
}

fn default_mixing() -> f64 {
    0.1
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    pub b: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub horizon: Option<u64>,
    pub seed: Option<u64>,
    pub replicas: Option<u32>,
    pub decomposition: Option<bool>,
    /// "sup" or "euclidean".
    pub norm: Option<String>,
    pub checkpoint_start: Option<u64>,
    pub checkpoint_ratio: Option<u64>,
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub replicas: Option<u32>,
    pub tail_fraction: Option<f64>,
    pub slope_band: Option<[f64; 2]>,
    pub gain_slope_band: Option<[f64; 2]>,
    pub sup_ratio_limit: Option<f64>,
}

/// Fully resolved configuration: what actually ran.
#[derive(Debug, Clone, Serialize)]
pub struct ResolvedConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chain: Option<ChainSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mdp: Option<ResolvedMdp>,
    pub schedule: ResolvedSchedule,
    pub run: ResolvedRun,
    pub sweep: ResolvedSweep,
}

#[derive(Debug, Clone, Serialize)]
pub struct ResolvedMdp {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generate: Option<GenerateSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rewards: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub transitions: Option<Vec<Vec<Vec<f64>>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p0: Option<Vec<f64>>,
    pub policy: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ResolvedSchedule {
    pub b: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ResolvedRun {
    pub horizon: u64,
    pub seed: u64,
    pub replicas: u32,
    pub decomposition: bool,
    pub norm: String,
    pub checkpoint_start: u64,
    pub checkpoint_ratio: u64,
    pub threads: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ResolvedSweep {
    pub replicas: u32,
    pub tail_fraction: f64,
    pub slope_band: [f64; 2],
    pub gain_slope_band: [f64; 2],
    pub sup_ratio_limit: f64,
}

impl ResolvedRun {
    pub fn norm(&self) -> Norm {
        match self.norm.as_str() {
            "euclidean" => Norm::Euclidean,
            _ => Norm::Sup,
        }
    }
}

/// Inline flag overrides; any field set here wins over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub b: Option<f64>,
    pub horizon: Option<u64>,
    pub seed: Option<u64>,
    pub replicas: Option<u32>,
    pub n_states: Option<usize>,
    pub n_actions: Option<usize>,
    pub mdp_seed: Option<u64>,
    pub mixing: Option<f64>,
    pub threads: Option<usize>,
    pub decomposition: Option<bool>,
}

pub fn load_file(path: &Path) -> Result<FileConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read config file {}", path.display()))?;
    let value: toml::Value =
        toml::from_str(&text).with_context(|| format!("cannot parse {}", path.display()))?;
    // A manifest.toml nests the sections under [config]; accept it directly
    // so any run can be reproduced from its manifest.
    let value = match value {
        toml::Value::Table(mut table) if table.contains_key("config") => {
            table.remove("config").expect("key present")
        }
        other => other,
    };
    FileConfig::deserialize(value).with_context(|| format!("cannot parse {}", path.display()))
}

/// Merges file and flags, applies defaults, and validates every invariant
/// the run relies on. Errors name the violated field.
pub fn resolve(file: FileConfig, over: &Overrides) -> Result<ResolvedConfig> {
    let b = over
        .b
        .or(file.schedule.as_ref().and_then(|s| s.b))
        .unwrap_or(0.9);
    StepSchedule::primary(b)
        .map_err(|_| anyhow!("schedule.b = {b} outside the supported range (0.8, 1]"))?;

    let run_in = file.run.unwrap_or_default();
    let run = ResolvedRun {
        horizon: over.horizon.or(run_in.horizon).unwrap_or(1_000_000),
        seed: over.seed.or(run_in.seed).unwrap_or(0),
        replicas: over.replicas.or(run_in.replicas).unwrap_or(1),
        decomposition: over.decomposition.or(run_in.decomposition).unwrap_or(false),
        norm: run_in.norm.unwrap_or_else(|| "sup".into()),
        checkpoint_start: run_in.checkpoint_start.unwrap_or(16),
        checkpoint_ratio: run_in.checkpoint_ratio.unwrap_or(2),
        threads: over.threads.or(run_in.threads).unwrap_or(0),
    };
    if run.horizon == 0 {
        bail!("run.horizon must be at least 1");
    }
    if run.replicas == 0 {
        bail!("run.replicas must be at least 1");
    }
    if run.checkpoint_ratio < 2 {
        bail!("run.checkpoint_ratio must be at least 2");
    }
    if !matches!(run.norm.as_str(), "sup" | "euclidean") {
        bail!("run.norm must be \"sup\" or \"euclidean\", got {:?}", run.norm);
    }

    let sweep_in = file.sweep.unwrap_or_default();
    let sweep = ResolvedSweep {
        replicas: sweep_in.replicas.unwrap_or(100),
        tail_fraction: sweep_in.tail_fraction.unwrap_or(0.1),
        slope_band: sweep_in.slope_band.unwrap_or([-0.75, -0.35]),
        gain_slope_band: sweep_in.gain_slope_band.unwrap_or([-1.2, -0.8]),
        sup_ratio_limit: sweep_in.sup_ratio_limit.unwrap_or(1.5),
    };
    if sweep.replicas == 0 {
        bail!("sweep.replicas must be at least 1");
    }
    if !(sweep.tail_fraction > 0.0 && sweep.tail_fraction < 1.0) {
        bail!("sweep.tail_fraction must lie in (0, 1)");
    }
    if sweep.slope_band[0] > sweep.slope_band[1] {
        bail!("sweep.slope_band must be ordered [lo, hi]");
    }

    let mdp = resolve_mdp(file.mdp, over)?;
    if let Some(chain) = &file.chain {
        // Validate eagerly so errors name the offending row now.
        build_chain(chain)?;
    }

    Ok(ResolvedConfig { chain: file.chain, mdp, schedule: ResolvedSchedule { b }, run, sweep })
}

fn resolve_mdp(section: Option<MdpSection>, over: &Overrides) -> Result<Option<ResolvedMdp>> {
    let mut section = section.unwrap_or_default();
    if over.n_states.is_some() || over.mdp_seed.is_some() {
        section.generate = Some(GenerateSection {
            n_states: over
                .n_states
                .or(section.generate.as_ref().map(|g| g.n_states))
                .ok_or_else(|| anyhow!("--n-states is required to generate an MDP"))?,
            n_actions: over
                .n_actions
                .or(section.generate.as_ref().map(|g| g.n_actions))
                .unwrap_or_else(default_n_actions),
            seed: over
                .mdp_seed
                .or(section.generate.as_ref().map(|g| g.seed))
                .unwrap_or(0),
            mixing: over
                .mixing
                .or(section.generate.as_ref().map(|g| g.mixing))
                .unwrap_or_else(default_mixing),
        });
    }
    let explicit = section.rewards.is_some() || section.transitions.is_some();
    if !explicit && section.generate.is_none() {
        return Ok(None);
    }
    if explicit && section.generate.is_some() {
        bail!("mdp: give either explicit tables or [mdp.generate], not both");
    }
    if explicit && (section.rewards.is_none() || section.transitions.is_none()) {
        bail!("mdp: explicit form needs both rewards and transitions");
    }
    let policy = section.policy.clone();
    let resolved = ResolvedMdp {
        generate: section.generate,
        rewards: section.rewards,
        transitions: section.transitions,
        p0: section.p0,
        policy: policy.unwrap_or_default(),
    };
    // Build once now: surfaces shape/stochasticity errors with field names,
    // and fills in the uniform policy.
    let (mdp, policy) = build_mdp(&resolved)?;
    let mut resolved = resolved;
    if resolved.policy.is_empty() {
        resolved.policy = (0..mdp.n_states())
            .map(|s| policy.row(s).to_vec())
            .collect();
    }
    Ok(Some(resolved))
}

/// Instantiates the MDP and policy described by a resolved config.
pub fn build_mdp(resolved: &ResolvedMdp) -> Result<(TabularMdp, PolicySpec)> {
    let mdp = if let Some(g) = &resolved.generate {
        TabularMdp::random_ergodic(g.n_states, g.n_actions, g.seed, g.mixing)
            .map_err(|e| anyhow!("mdp.generate: {e}"))?
    } else {
        let rewards = resolved.rewards.as_ref().expect("validated");
        let transitions = resolved.transitions.as_ref().expect("validated");
        let n_states = rewards.len();
        let n_actions = rewards.first().map(Vec::len).unwrap_or(0);
        let flat_rewards: Vec<f64> = rewards.iter().flatten().copied().collect();
        let mut flat_transitions = Vec::with_capacity(n_states * n_actions * n_states);
        if transitions.len() != n_states {
            bail!(
                "mdp.transitions has {} state entries, rewards imply {n_states}",
                transitions.len()
            );
        }
        for (s, per_action) in transitions.iter().enumerate() {
            if per_action.len() != n_actions {
                bail!(
                    "mdp.transitions[{s}] has {} action rows, rewards imply {n_actions}",
                    per_action.len()
                );
            }
            for row in per_action {
                flat_transitions.extend(row.iter().copied());
            }
        }
        let p0 = resolved
            .p0
            .clone()
            .unwrap_or_else(|| vec![1.0 / n_states as f64; n_states]);
        TabularMdp::new(n_states, n_actions, flat_rewards, flat_transitions, p0)
            .map_err(|e| anyhow!("mdp: {e}"))?
    };
    let policy = if resolved.policy.is_empty() {
        PolicySpec::uniform(mdp.n_states(), mdp.n_actions())
    } else {
        let flat: Vec<f64> = resolved.policy.iter().flatten().copied().collect();
        PolicySpec::new(mdp.n_states(), mdp.n_actions(), flat)
            .map_err(|e| anyhow!("mdp.policy: {e}"))?
    };
    Ok((mdp, policy))
}

pub fn build_oracle(mdp: &TabularMdp, policy: &PolicySpec) -> Result<EvalOracle> {
    EvalOracle::new(mdp, policy).map_err(|e| anyhow!("induced chain: {e}"))
}

/// Builds a validated chain from an explicit `[chain]` section.
pub fn build_chain(section: &ChainSection) -> Result<FiniteChain> {
    FiniteChain::from_rows(&section.rows).map_err(|e| anyhow!("chain: {e}"))
}
