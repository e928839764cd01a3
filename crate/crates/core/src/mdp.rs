//! Average-reward evaluation structure for tabular MDPs under a fixed policy.
//!
//! [`EvalOracle`] holds the induced chain `P_pi`, the induced rewards
//! `r_pi`, the gain `J = d_muᵀ r_pi`, and the bias `v = D r_pi` — the unique
//! solution of the evaluation equation
//!
//! ```text
//! v = r_pi - J e + P_pi v
//! ```
//!
//! normalized by `d_muᵀ v = 0`. Solutions form the line `{v + c e}`; the
//! normalized point makes distances to that line well-defined, and in sup
//! norm the distance is simply `span(w)/2` of the offset `w`.

use rand::RngExt;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::linalg::{dot, Matrix};
use crate::markov::{ChainError, FiniteChain, STOCHASTIC_TOL};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MdpError {
    #[error("reward table has {got} entries, expected {expected}")]
    RewardShape { expected: usize, got: usize },
    #[error("transition tensor has {got} entries, expected {expected}")]
    TransitionShape { expected: usize, got: usize },
    #[error("transition row (s={s}, a={a}) sums to {sum:.15}")]
    TransitionRowNotStochastic { s: usize, a: usize, sum: f64 },
    #[error("negative transition probability at (s={s}, a={a}, s'={sp})")]
    NegativeTransition { s: usize, a: usize, sp: usize },
    #[error("initial distribution invalid: {context}")]
    InvalidInitialDistribution { context: String },
    #[error("policy row for state {s} sums to {sum:.15}")]
    PolicyRowNotStochastic { s: usize, sum: f64 },
    #[error("negative policy probability at (s={s}, a={a})")]
    NegativePolicy { s: usize, a: usize },
    #[error("policy shape mismatch: {context}")]
    PolicyShape { context: String },
    #[error("mixing weight {mixing} outside (0, 1]")]
    InvalidMixing { mixing: f64 },
    #[error(transparent)]
    Chain(#[from] ChainError),
}

/// A finite MDP: rewards `r(s, a)`, transitions `p(s'|s, a)`, and an initial
/// distribution. Immutable after construction.
#[derive(Debug, Clone)]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    rewards: Vec<f64>,
    transitions: Vec<f64>,
    p0: Vec<f64>,
}

impl TabularMdp {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        rewards: Vec<f64>,
        transitions: Vec<f64>,
        p0: Vec<f64>,
    ) -> Result<Self, MdpError> {
        if rewards.len() != n_states * n_actions {
            return Err(MdpError::RewardShape {
                expected: n_states * n_actions,
                got: rewards.len(),
            });
        }
        if transitions.len() != n_states * n_actions * n_states {
            return Err(MdpError::TransitionShape {
                expected: n_states * n_actions * n_states,
                got: transitions.len(),
            });
        }
        for s in 0..n_states {
            for a in 0..n_actions {
                let base = (s * n_actions + a) * n_states;
                let mut sum = 0.0;
                for sp in 0..n_states {
                    let v = transitions[base + sp];
                    if v < 0.0 {
                        return Err(MdpError::NegativeTransition { s, a, sp });
                    }
                    sum += v;
                }
                if (sum - 1.0).abs() > STOCHASTIC_TOL {
                    return Err(MdpError::TransitionRowNotStochastic { s, a, sum });
                }
            }
        }
        if p0.len() != n_states {
            return Err(MdpError::InvalidInitialDistribution {
                context: format!("length {} for {n_states} states", p0.len()),
            });
        }
        let p0_sum: f64 = p0.iter().sum();
        if p0.iter().any(|&v| v < 0.0) || (p0_sum - 1.0).abs() > STOCHASTIC_TOL {
            return Err(MdpError::InvalidInitialDistribution {
                context: format!("entries must be nonnegative and sum to 1, sum = {p0_sum}"),
            });
        }
        Ok(Self { n_states, n_actions, rewards, transitions, p0 })
    }

    /// Random ergodic MDP: each transition row is a symmetric simplex draw
    /// mixed toward uniform with weight `mixing`, which makes every row
    /// strictly positive and hence any full-support policy induce an
    /// irreducible aperiodic chain. Rewards are uniform on [0, 1); the
    /// initial distribution is uniform.
    pub fn random_ergodic(
        n_states: usize,
        n_actions: usize,
        seed: u64,
        mixing: f64,
    ) -> Result<Self, MdpError> {
        if !(mixing > 0.0 && mixing <= 1.0) {
            return Err(MdpError::InvalidMixing { mixing });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut transitions = Vec::with_capacity(n_states * n_actions * n_states);
        for _ in 0..n_states * n_actions {
            let mut row: Vec<f64> =
                (0..n_states).map(|_| -f64::ln(1.0 - rng.random::<f64>())).collect();
            let sum: f64 = row.iter().sum();
            for v in &mut row {
                *v = (1.0 - mixing) * *v / sum + mixing / n_states as f64;
            }
            transitions.extend(row);
        }
        let rewards: Vec<f64> = (0..n_states * n_actions).map(|_| rng.random()).collect();
        let p0 = vec![1.0 / n_states as f64; n_states];
        Self::new(n_states, n_actions, rewards, transitions, p0)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.rewards[s * self.n_actions + a]
    }

    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        let base = (s * self.n_actions + a) * self.n_states;
        &self.transitions[base..base + self.n_states]
    }

    pub fn transition(&self, s: usize, a: usize, sp: usize) -> f64 {
        self.transition_row(s, a)[sp]
    }

    pub fn initial_distribution(&self) -> &[f64] {
        &self.p0
    }
}

/// A stationary stochastic policy `pi(a|s)`.
#[derive(Debug, Clone)]
pub struct PolicySpec {
    n_states: usize,
    n_actions: usize,
    probs: Vec<f64>,
}

impl PolicySpec {
    pub fn new(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self, MdpError> {
        if probs.len() != n_states * n_actions {
            return Err(MdpError::PolicyShape {
                context: format!(
                    "{} entries for {n_states} states x {n_actions} actions",
                    probs.len()
                ),
            });
        }
        for s in 0..n_states {
            let mut sum = 0.0;
            for a in 0..n_actions {
                let v = probs[s * n_actions + a];
                if v < 0.0 {
                    return Err(MdpError::NegativePolicy { s, a });
                }
                sum += v;
            }
            if (sum - 1.0).abs() > STOCHASTIC_TOL {
                return Err(MdpError::PolicyRowNotStochastic { s, sum });
            }
        }
        Ok(Self { n_states, n_actions, probs })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_states,
            n_actions,
            probs: vec![1.0 / n_actions as f64; n_states * n_actions],
        }
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }
}

/// `(P_pi, r_pi)`: the chain and reward vector induced by a policy.
pub fn induced_chain(mdp: &TabularMdp, policy: &PolicySpec) -> Result<(Matrix, Vec<f64>), MdpError> {
    if policy.n_states() != mdp.n_states() || policy.n_actions() != mdp.n_actions() {
        return Err(MdpError::PolicyShape {
            context: format!(
                "policy is {}x{}, mdp is {}x{}",
                policy.n_states(),
                policy.n_actions(),
                mdp.n_states(),
                mdp.n_actions()
            ),
        });
    }
    let n = mdp.n_states();
    let mut p_pi = Matrix::zeros(n, n);
    let mut r_pi = vec![0.0; n];
    for s in 0..n {
        for a in 0..mdp.n_actions() {
            let w = policy.prob(s, a);
            if w == 0.0 {
                continue;
            }
            r_pi[s] += w * mdp.reward(s, a);
            let row = mdp.transition_row(s, a);
            for sp in 0..n {
                let v = p_pi.get(s, sp) + w * row[sp];
                p_pi.set(s, sp, v);
            }
        }
    }
    Ok((p_pi, r_pi))
}

/// `max(w) - min(w)`.
pub fn span(w: &[f64]) -> f64 {
    let max = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = w.iter().copied().fold(f64::INFINITY, f64::min);
    max - min
}

/// Exact evaluation quantities for one (MDP, policy) pair.
#[derive(Debug, Clone)]
pub struct EvalOracle {
    chain: FiniteChain,
    r_pi: Vec<f64>,
    gain: f64,
    bias: Vec<f64>,
}

impl EvalOracle {
    pub fn new(mdp: &TabularMdp, policy: &PolicySpec) -> Result<Self, MdpError> {
        let (p_pi, r_pi) = induced_chain(mdp, policy)?;
        let chain = FiniteChain::new(p_pi)?;
        let gain = dot(chain.stationary(), &r_pi);
        let bias = chain.deviation().matvec(&r_pi);
        Ok(Self { chain, r_pi, gain, bias })
    }

    pub fn chain(&self) -> &FiniteChain {
        &self.chain
    }

    pub fn p_pi(&self) -> &Matrix {
        self.chain.transition()
    }

    pub fn r_pi(&self) -> &[f64] {
        &self.r_pi
    }

    /// Long-run average reward `d_muᵀ r_pi`.
    pub fn gain(&self) -> f64 {
        self.gain
    }

    /// The bias `D r_pi`, normalized so `d_muᵀ v = 0`.
    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    /// `||r_pi - J e + P_pi v - v||_inf`.
    pub fn bellman_residual(&self, v: &[f64], gain: f64) -> f64 {
        let pv = self.chain.transition().matvec(v);
        let mut worst = 0.0f64;
        for s in 0..v.len() {
            worst = worst.max((self.r_pi[s] - gain + pv[s] - v[s]).abs());
        }
        worst
    }

    /// Sup-norm distance from `v` to the solution line `{bias + c e}`:
    /// `min_c ||v - bias - c e||_inf = span(v - bias)/2`, the optimal `c`
    /// being the midrange of the offset.
    pub fn distance_to_fixed_set(&self, v: &[f64]) -> f64 {
        let offset: Vec<f64> = v.iter().zip(&self.bias).map(|(a, b)| a - b).collect();
        span(&offset) / 2.0
    }

    /// Per-state Bellman residual vector `r_pi - J e + P_pi v - v`.
    pub fn bellman_residual_vector(&self, v: &[f64], gain: f64) -> Vec<f64> {
        let pv = self.chain.transition().matvec(v);
        (0..v.len()).map(|s| self.r_pi[s] - gain + pv[s] - v[s]).collect()
    }
}

/// Largest violation of the evaluation identities for an oracle: the Bellman
/// residual at `(bias, gain)` and the normalization `d_muᵀ bias`.
pub fn oracle_self_check(oracle: &EvalOracle) -> (f64, f64) {
    let bell = oracle.bellman_residual(oracle.bias(), oracle.gain());
    let norm = dot(oracle.chain().stationary(), oracle.bias()).abs();
    (bell, norm)
}
