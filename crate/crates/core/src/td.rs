//! Tabular average-reward temporal-difference evaluation.
//!
//! The online update keeps a scalar running estimate `J_t` of the gain next
//! to the value table `v_t`:
//!
//! ```text
//! J_{t+1}    = J_t + beta_{t+1} (R_{t+1} - J_t)
//! v_{t+1}(S_t) = v_t(S_t) + alpha_{t+1} (R_{t+1} - J_t + v_t(S_{t+1}) - v_t(S_t))
//! ```
//!
//! with `beta_t = 1/t`, which makes `J_t` exactly the running mean of
//! `R_1..R_t`. Both updates read the pre-update `J_t`.
//!
//! The same update is algebraically an SKM iteration over the augmented
//! chain of transition triples `Y_{t+1} = (S_t, A_t, S_{t+1})`:
//!
//! ```text
//! v_{t+1} = v_t + alpha_{t+1} (H(v_t, Y_{t+1}) - v_t + eps_{t+1})
//! H(v, (s0, a0, s1))[s] = 1{s = s0} (r(s0, a0) - J + v(s1) - v(s0)) + v(s)
//! ```
//!
//! where `J` is the exact gain and `eps_{t+1}(s) = 1{s = S_t} (J - J_t)`
//! carries the estimation error of `J_t` as additive noise. The sign of
//! `eps` is the one forced by expanding the compact form against the online
//! update; only its magnitude `|J - J_t|` matters for the noise bounds.
//! [`run_td`] can verify the expansion numerically at every step.
//!
//! `H` is 1-Lipschitz in `v` under the sup norm: the `s`-th component of
//! `H(v, y) - H(v', y)` is `v(s) - v'(s)` off the updated state and
//! `v(s1) - v'(s1)` on it.

use rand::RngExt;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use thiserror::Error;

use crate::engine::{
    self, EngineError, NoiseSource, SkmOperator, SkmRunConfig, TrajectoryRecord,
};
use crate::linalg::Matrix;
use crate::markov::FiniteChain;
use crate::mdp::{EvalOracle, MdpError, PolicySpec, TabularMdp};
use crate::schedules::{ScheduleError, StepSchedule};

/// Dense solves on the augmented chain stay fast below this many triples.
pub const MAX_TRIPLES: usize = 2000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TdError {
    #[error("state index {index} out of range for {n_states} states")]
    IndexOutOfRange { index: usize, n_states: usize },
    #[error("augmented chain has {count} triples, decomposition supports at most {max}")]
    TooManyTriples { count: usize, max: usize },
    #[error("iterate became non-finite at step {step}")]
    NonFiniteIterate { step: u64 },
    #[error(
        "online update and compact form disagree by {delta:.3e} at step {step} (tolerance {tol:.0e})"
    )]
    CompactFormMismatch { step: u64, delta: f64, tol: f64 },
    #[error("no transition triple ends in state {state}")]
    NoTripleEndsAt { state: usize },
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
}

/// Per-step tolerance for the compact-form identity check.
pub const COMPACT_FORM_TOL: f64 = 1e-12;

/// The chain of transition triples `(s, a, s')` with positive probability.
///
/// Its transition law moves from `(s, a, s')` to `(u, b, u')` with
/// probability `1{u = s'} pi(b|u) p(u'|u, b)`, and its stationary
/// distribution factorizes as `d_mu(s) pi(a|s) p(s'|s, a)`; the product form
/// is stored exactly and cross-checked against the dense solve in tests.
#[derive(Debug, Clone)]
pub struct AugmentedChain {
    triples: Vec<(usize, usize, usize)>,
    index: HashMap<(usize, usize, usize), usize>,
    stationary: Vec<f64>,
    chain: FiniteChain,
}

fn enumerate_triples(mdp: &TabularMdp, policy: &PolicySpec) -> Vec<(usize, usize, usize)> {
    let mut triples = Vec::new();
    for s in 0..mdp.n_states() {
        for a in 0..mdp.n_actions() {
            if policy.prob(s, a) <= 0.0 {
                continue;
            }
            for sp in 0..mdp.n_states() {
                if mdp.transition(s, a, sp) > 0.0 {
                    triples.push((s, a, sp));
                }
            }
        }
    }
    triples
}

impl AugmentedChain {
    pub fn new(
        mdp: &TabularMdp,
        policy: &PolicySpec,
        oracle: &EvalOracle,
    ) -> Result<Self, TdError> {
        let triples = enumerate_triples(mdp, policy);
        if triples.len() > MAX_TRIPLES {
            return Err(TdError::TooManyTriples { count: triples.len(), max: MAX_TRIPLES });
        }
        let index: HashMap<_, _> =
            triples.iter().enumerate().map(|(i, &t)| (t, i)).collect();
        let m = triples.len();
        let mut p = Matrix::zeros(m, m);
        for (row, &(_, _, sp)) in triples.iter().enumerate() {
            for (col, &(u, b, up)) in triples.iter().enumerate() {
                if u == sp {
                    p.set(row, col, policy.prob(u, b) * mdp.transition(u, b, up));
                }
            }
        }
        let chain = FiniteChain::new(p).map_err(MdpError::from)?;
        let d_mu = oracle.chain().stationary();
        let stationary: Vec<f64> = triples
            .iter()
            .map(|&(s, a, sp)| d_mu[s] * policy.prob(s, a) * mdp.transition(s, a, sp))
            .collect();
        Ok(Self { triples, index, stationary, chain })
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn triples(&self) -> &[(usize, usize, usize)] {
        &self.triples
    }

    pub fn index_of(&self, s: usize, a: usize, sp: usize) -> Option<usize> {
        self.index.get(&(s, a, sp)).copied()
    }

    /// Exact product-form stationary distribution over triples.
    pub fn stationary(&self) -> &[f64] {
        &self.stationary
    }

    pub fn chain(&self) -> &FiniteChain {
        &self.chain
    }

    /// Marginal of the product stationary distribution onto the first
    /// coordinate; equals the base chain's stationary distribution.
    pub fn first_marginal(&self, n_states: usize) -> Vec<f64> {
        let mut out = vec![0.0; n_states];
        for (&(s, _, _), &w) in self.triples.iter().zip(&self.stationary) {
            out[s] += w;
        }
        out
    }
}

/// The TD update map over the augmented chain, using the exact gain; the
/// gain-estimation error enters separately as additive noise.
#[derive(Debug, Clone)]
pub struct TdOperator {
    n_states: usize,
    triples: Vec<(usize, usize, usize)>,
    triple_rewards: Vec<f64>,
    stationary: Vec<f64>,
    gain: f64,
}

impl TdOperator {
    pub fn new(mdp: &TabularMdp, policy: &PolicySpec, oracle: &EvalOracle) -> Self {
        let triples = enumerate_triples(mdp, policy);
        let triple_rewards = triples.iter().map(|&(s, a, _)| mdp.reward(s, a)).collect();
        let d_mu = oracle.chain().stationary();
        let stationary = triples
            .iter()
            .map(|&(s, a, sp)| d_mu[s] * policy.prob(s, a) * mdp.transition(s, a, sp))
            .collect();
        Self { n_states: mdp.n_states(), triples, triple_rewards, stationary, gain: oracle.gain() }
    }

    pub fn triples(&self) -> &[(usize, usize, usize)] {
        &self.triples
    }

    pub fn stationary(&self) -> &[f64] {
        &self.stationary
    }

    pub fn gain(&self) -> f64 {
        self.gain
    }

    /// `||v - h(v)||_inf` with `h` taken over the augmented stationary
    /// distribution.
    pub fn residual(&self, v: &[f64]) -> f64 {
        engine::residual(v, self, &self.stationary, engine::Norm::Sup)
    }
}

impl SkmOperator for TdOperator {
    fn dimension(&self) -> usize {
        self.n_states
    }

    fn evaluate_into(&self, v: &[f64], y: usize, out: &mut [f64]) {
        out.copy_from_slice(v);
        let (s0, _, s1) = self.triples[y];
        out[s0] += self.triple_rewards[y] - self.gain + v[s1] - v[s0];
    }
}

/// Value table, gain estimate, and step count of one TD run.
#[derive(Debug, Clone, PartialEq)]
pub struct TdState {
    pub v: Vec<f64>,
    pub j: f64,
    pub t: u64,
}

impl TdState {
    pub fn new(n_states: usize) -> Self {
        Self { v: vec![0.0; n_states], j: 0.0, t: 0 }
    }
}

/// One online TD update from the observed transition
/// `(s_t, a_t, r_{t+1}, s_{t+1})`; the action is not used by the update.
/// Both the gain and value updates read the pre-update `J_t`.
pub fn td_step(
    state: &mut TdState,
    s_t: usize,
    reward: f64,
    s_next: usize,
    alpha: f64,
    beta: f64,
) -> Result<(), TdError> {
    let n = state.v.len();
    if s_t >= n {
        return Err(TdError::IndexOutOfRange { index: s_t, n_states: n });
    }
    if s_next >= n {
        return Err(TdError::IndexOutOfRange { index: s_next, n_states: n });
    }
    let j_pre = state.j;
    state.j += beta * (reward - j_pre);
    state.v[s_t] += alpha * (reward - j_pre + state.v[s_next] - state.v[s_t]);
    state.t += 1;
    Ok(())
}

/// The additive-noise vector of the compact form: `(J - J_t)` at the updated
/// state, zero elsewhere. Its sup norm is `|J - J_t|`.
pub fn epsilon_noise(state: &TdState, s_t: usize, oracle: &EvalOracle) -> Vec<f64> {
    let mut out = vec![0.0; state.v.len()];
    out[s_t] = oracle.gain() - state.j;
    out
}

#[derive(Debug, Clone)]
pub struct TdRunConfig {
    pub b: f64,
    pub horizon: u64,
    pub seed: u64,
    pub checkpoints: Vec<u64>,
    /// Re-derive each online update through the compact form and abort on
    /// any disagreement beyond [`COMPACT_FORM_TOL`].
    pub check_compact_form: bool,
    pub v0: Option<Vec<f64>>,
    pub j0: f64,
}

impl TdRunConfig {
    pub fn new(b: f64, horizon: u64, seed: u64) -> Result<Self, TdError> {
        StepSchedule::primary(b)?;
        Ok(Self {
            b,
            horizon,
            seed,
            checkpoints: engine::geometric_checkpoints(16, 2, horizon),
            check_compact_form: false,
            v0: None,
            j0: 0.0,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TdCheckpointRow {
    pub t: u64,
    pub tau: f64,
    pub bellman_residual: f64,
    pub dist_fixed_set: f64,
    pub abs_gain_err: f64,
    pub operator_residual: f64,
}

#[derive(Debug, Clone)]
pub struct TdTrajectory {
    pub seed: u64,
    pub rows: Vec<TdCheckpointRow>,
    pub final_state: TdState,
}

/// Inverse-CDF draw over an arbitrary probability row.
fn draw_index(row: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    row.iter().rposition(|&p| p > 0.0).unwrap_or(row.len() - 1)
}

/// Simulates the MDP under the policy and applies the online update,
/// recording evaluation metrics at the configured checkpoints.
///
/// `oracle` must be built from the same `(mdp, policy)` pair; it supplies
/// the exact gain and bias for the recorded metrics.
pub fn run_td(
    mdp: &TabularMdp,
    policy: &PolicySpec,
    oracle: &EvalOracle,
    config: &TdRunConfig,
) -> Result<TdTrajectory, TdError> {
    let schedule = StepSchedule::primary(config.b)?;
    let beta = StepSchedule::secondary();
    let n = mdp.n_states();
    let operator = TdOperator::new(mdp, policy, oracle);
    // Triple indices are only needed when re-deriving updates through H.
    let triple_index: Option<HashMap<(usize, usize, usize), usize>> = config
        .check_compact_form
        .then(|| operator.triples().iter().enumerate().map(|(i, &t)| (t, i)).collect());

    let mut state = TdState::new(n);
    if let Some(v0) = &config.v0 {
        state.v = v0.clone();
    }
    state.j = config.j0;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut s = draw_index(mdp.initial_distribution(), rng.random());
    let mut tau = 0.0;
    let mut rows = Vec::with_capacity(config.checkpoints.len());
    let mut checkpoint_iter = config.checkpoints.iter().copied().peekable();

    for t in 0..config.horizon {
        let step = t + 1;
        let a = draw_index(policy.row(s), rng.random());
        let reward = mdp.reward(s, a);
        let s_next = draw_index(mdp.transition_row(s, a), rng.random());
        let alpha = schedule.rate(step);
        let beta_t = beta.rate(step);

        let compact = if let Some(index) = &triple_index {
            let y = index[&(s, a, s_next)];
            let mut h = vec![0.0; n];
            operator.evaluate_into(&state.v, y, &mut h);
            let eps = epsilon_noise(&state, s, oracle);
            Some(
                state
                    .v
                    .iter()
                    .zip(&h)
                    .zip(&eps)
                    .map(|((vi, hi), ei)| vi + alpha * (hi - vi + ei))
                    .collect::<Vec<f64>>(),
            )
        } else {
            None
        };

        td_step(&mut state, s, reward, s_next, alpha, beta_t)?;

        if let Some(compact_v) = compact {
            let delta = state
                .v
                .iter()
                .zip(&compact_v)
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            if delta > COMPACT_FORM_TOL {
                return Err(TdError::CompactFormMismatch {
                    step,
                    delta,
                    tol: COMPACT_FORM_TOL,
                });
            }
        }

        if !state.v[s].is_finite() || !state.j.is_finite() {
            return Err(TdError::NonFiniteIterate { step });
        }

        s = s_next;
        tau += alpha * (1.0 - alpha);

        if checkpoint_iter.peek() == Some(&step) {
            checkpoint_iter.next();
            rows.push(TdCheckpointRow {
                t: step,
                tau,
                bellman_residual: oracle.bellman_residual(&state.v, oracle.gain()),
                dist_fixed_set: oracle.distance_to_fixed_set(&state.v),
                abs_gain_err: (state.j - oracle.gain()).abs(),
                operator_residual: operator.residual(&state.v),
            });
        }
    }

    Ok(TdTrajectory { seed: config.seed, rows, final_state: state })
}

/// Additive-noise hook that reproduces the gain estimator `J_t` inside the
/// engine: emits `(J - J_t)` at the triple's head state, then folds the
/// triple's reward into `J` with `beta_{t+1} = 1/(t+1)`.
#[derive(Debug, Clone)]
pub struct GainEstimatorNoise {
    gain: f64,
    j: f64,
    triple_heads: Vec<usize>,
    triple_rewards: Vec<f64>,
}

impl GainEstimatorNoise {
    pub fn new(operator: &TdOperator, j0: f64) -> Self {
        Self {
            gain: operator.gain(),
            j: j0,
            triple_heads: operator.triples().iter().map(|&(s, _, _)| s).collect(),
            triple_rewards: operator.triple_rewards.clone(),
        }
    }

    pub fn gain_estimate(&self) -> f64 {
        self.j
    }
}

impl NoiseSource for GainEstimatorNoise {
    fn sample_into(&mut self, step: u64, _x: &[f64], y_next: usize, out: &mut [f64]) {
        out.fill(0.0);
        out[self.triple_heads[y_next]] = self.gain - self.j;
        let beta = 1.0 / (step + 1) as f64;
        self.j += beta * (self.triple_rewards[y_next] - self.j);
    }
}

/// Runs TD through the generic engine over the augmented chain with the
/// Poisson noise decomposition enabled. The initial augmented state is any
/// triple ending at `S_0 ~ p0`.
pub fn run_td_decomposed(
    mdp: &TabularMdp,
    policy: &PolicySpec,
    oracle: &EvalOracle,
    augmented: &AugmentedChain,
    config: &SkmRunConfig,
) -> Result<TrajectoryRecord, TdError> {
    let operator = TdOperator::new(mdp, policy, oracle);
    let mut noise = GainEstimatorNoise::new(&operator, 0.0);
    let mut engine_config = config.clone();
    engine_config.decomposition = true;
    let mut seed_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5851_f42d_4c95_7f2d);
    let s0 = draw_index(mdp.initial_distribution(), seed_rng.random());
    engine_config.y0 = augmented
        .triples()
        .iter()
        .position(|&(_, _, sp)| sp == s0)
        .ok_or(TdError::NoTripleEndsAt { state: s0 })?;
    Ok(engine::run(&operator, augmented.chain(), &mut noise, &engine_config)?)
}
