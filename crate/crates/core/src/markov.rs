//! Finite ergodic Markov chains.
//!
//! A [`FiniteChain`] bundles a validated row-stochastic transition matrix `P`
//! with its stationary distribution `d_mu`, its deviation matrix `D`, and
//! precomputed per-row CDFs for sampling. The deviation matrix solves
//!
//! ```text
//! (I - P) D = I - e d_muᵀ,    D e = 0,
//! ```
//!
//! and is what turns an update table `H_x` (one row per chain state) into the
//! solution `nu_x = D H_x` of the chain's Poisson equation
//!
//! ```text
//! H(x, y) - h(x) = nu(x, y) - (P nu)(x, y),    h(x) = Σ_y d_mu(y) H(x, y).
//! ```
//!
//! Chains here are small, so `d_mu` and `D` come from dense LU solves rather
//! than iterative methods.

use rand::RngExt;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::linalg::{dot, LuFactor, Matrix};

/// Input rows must sum to one within this tolerance; they are renormalized
/// afterwards so downstream identities see exactly stochastic rows.
pub const STOCHASTIC_TOL: f64 = 1e-12;

/// Tolerance for the stationary and deviation identities.
pub const IDENTITY_TOL: f64 = 1e-10;

/// Validation and construction errors for finite chains.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ChainError {
    #[error("matrix is not square: {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("empty transition matrix")]
    Empty,
    #[error("negative entry {value:.3e} at ({row}, {col})")]
    NegativeEntry { row: usize, col: usize, value: f64 },
    #[error("row {row} sums to {sum:.15} (off by more than {tol:.0e})", tol = STOCHASTIC_TOL)]
    NotStochastic { row: usize, sum: f64 },
    #[error("chain is reducible: states {states:?} do not communicate with state 0")]
    Reducible { states: Vec<usize> },
    #[error("chain is periodic with period {period}; one cyclic class is {class:?}")]
    Periodic { period: u64, class: Vec<usize> },
    #[error("linear solve failed; validated chain should never be singular: {0}")]
    SingularSystem(String),
    #[error("dimension mismatch: {context}")]
    DimensionMismatch { context: String },
}

/// Checks that `p` is square, nonnegative, row-stochastic within
/// [`STOCHASTIC_TOL`], irreducible, and aperiodic.
///
/// Irreducibility is strong connectivity of the positive-entry digraph;
/// aperiodicity is a unit gcd of return-cycle lengths computed from BFS
/// levels. The two checks are separate so errors can name the states
/// involved.
pub fn validate_chain(p: &Matrix) -> Result<(), ChainError> {
    let n = p.rows();
    if n == 0 {
        return Err(ChainError::Empty);
    }
    if p.cols() != n {
        return Err(ChainError::NotSquare { rows: n, cols: p.cols() });
    }
    for i in 0..n {
        let mut sum = 0.0;
        for j in 0..n {
            let v = p.get(i, j);
            if v < 0.0 {
                return Err(ChainError::NegativeEntry { row: i, col: j, value: v });
            }
            sum += v;
        }
        if (sum - 1.0).abs() > STOCHASTIC_TOL {
            return Err(ChainError::NotStochastic { row: i, sum });
        }
    }
    check_irreducible(p)?;
    check_aperiodic(p)?;
    Ok(())
}

fn successors(p: &Matrix, state: usize) -> impl Iterator<Item = usize> + '_ {
    p.row(state)
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > 0.0)
        .map(|(j, _)| j)
}

fn reachable_from_zero(p: &Matrix, reversed: bool) -> Vec<bool> {
    let n = p.rows();
    let mut seen = vec![false; n];
    let mut stack = vec![0usize];
    seen[0] = true;
    while let Some(u) = stack.pop() {
        for v in 0..n {
            let edge = if reversed { p.get(v, u) > 0.0 } else { p.get(u, v) > 0.0 };
            if edge && !seen[v] {
                seen[v] = true;
                stack.push(v);
            }
        }
    }
    seen
}

fn check_irreducible(p: &Matrix) -> Result<(), ChainError> {
    let fwd = reachable_from_zero(p, false);
    let bwd = reachable_from_zero(p, true);
    let missing: Vec<usize> = (0..p.rows()).filter(|&s| !fwd[s] || !bwd[s]).collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(ChainError::Reducible { states: missing })
    }
}

/// Period of an irreducible chain: gcd over all edges `u -> v` of
/// `level(u) + 1 - level(v)` where levels come from a BFS at state 0.
fn check_aperiodic(p: &Matrix) -> Result<(), ChainError> {
    let n = p.rows();
    let mut level = vec![usize::MAX; n];
    level[0] = 0;
    let mut queue = std::collections::VecDeque::from([0usize]);
    while let Some(u) = queue.pop_front() {
        for v in successors(p, u) {
            if level[v] == usize::MAX {
                level[v] = level[u] + 1;
                queue.push_back(v);
            }
        }
    }
    let mut period: u64 = 0;
    for u in 0..n {
        for v in successors(p, u) {
            let diff = (level[u] as i64 + 1 - level[v] as i64).unsigned_abs();
            period = gcd(period, diff);
        }
    }
    if period == 1 {
        Ok(())
    } else {
        let class = (0..n).filter(|&s| (level[s] as u64).is_multiple_of(period)).collect();
        Err(ChainError::Periodic { period, class })
    }
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Stationary distribution of a validated transition matrix: the dense solve
/// of `(Pᵀ - I) d = 0` with one row replaced by the normalization `Σ d = 1`.
pub fn stationary_distribution(p: &Matrix) -> Result<Vec<f64>, ChainError> {
    validate_chain(p)?;
    stationary_of_validated(p)
}

fn stationary_of_validated(p: &Matrix) -> Result<Vec<f64>, ChainError> {
    let n = p.rows();
    let mut system = p.transpose();
    for i in 0..n {
        let v = system.get(i, i);
        system.set(i, i, v - 1.0);
    }
    for j in 0..n {
        system.set(n - 1, j, 1.0);
    }
    let mut rhs = vec![0.0; n];
    rhs[n - 1] = 1.0;
    let lu = LuFactor::new(system).map_err(|e| ChainError::SingularSystem(e.to_string()))?;
    let d = lu.solve(&rhs);
    let residual = sup_residual_stationary(p, &d);
    if residual > IDENTITY_TOL || d.iter().any(|&x| x <= 0.0) {
        return Err(ChainError::SingularSystem(format!(
            "stationary solve residual {residual:.3e} or nonpositive entry"
        )));
    }
    Ok(d)
}

fn sup_residual_stationary(p: &Matrix, d: &[f64]) -> f64 {
    let dp = p.vecmat(d);
    dp.iter().zip(d).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
}

/// Deviation matrix `D = (I - P + e d_muᵀ)⁻¹ - e d_muᵀ`.
pub fn deviation_matrix(p: &Matrix, d_mu: &[f64]) -> Result<Matrix, ChainError> {
    let n = p.rows();
    if d_mu.len() != n {
        return Err(ChainError::DimensionMismatch {
            context: format!("stationary vector has length {}, chain has {n} states", d_mu.len()),
        });
    }
    let ones = vec![1.0; n];
    let e_dmu = Matrix::outer(&ones, d_mu);
    let system = Matrix::identity(n).sub(p).add(&e_dmu);
    let lu = LuFactor::new(system).map_err(|e| ChainError::SingularSystem(e.to_string()))?;
    let inv = lu.solve_matrix(&Matrix::identity(n));
    Ok(inv.sub(&e_dmu))
}

/// A validated ergodic chain with its stationary distribution, deviation
/// matrix, and per-row sampling CDFs.
///
/// Immutable after construction; share freely across threads.
#[derive(Debug, Clone)]
pub struct FiniteChain {
    p: Matrix,
    d_mu: Vec<f64>,
    deviation: Matrix,
    row_cdf: Vec<f64>,
}

impl FiniteChain {
    /// Validates `p`, renormalizes its rows, and solves for `d_mu` and `D`.
    pub fn new(p: Matrix) -> Result<Self, ChainError> {
        validate_chain(&p)?;
        let mut p = p;
        let n = p.rows();
        for i in 0..n {
            let sum: f64 = p.row(i).iter().sum();
            for v in p.row_mut(i) {
                *v /= sum;
            }
        }
        let d_mu = stationary_of_validated(&p)?;
        let deviation = deviation_matrix(&p, &d_mu)?;
        let mut row_cdf = vec![0.0; n * n];
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..n {
                acc += p.get(i, j);
                row_cdf[i * n + j] = acc;
            }
        }
        Ok(Self { p, d_mu, deviation, row_cdf })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, ChainError> {
        let p = Matrix::from_rows(rows).map_err(|e| ChainError::DimensionMismatch {
            context: e.to_string(),
        })?;
        Self::new(p)
    }

    pub fn n_states(&self) -> usize {
        self.p.rows()
    }

    pub fn transition(&self) -> &Matrix {
        &self.p
    }

    pub fn stationary(&self) -> &[f64] {
        &self.d_mu
    }

    pub fn deviation(&self) -> &Matrix {
        &self.deviation
    }

    /// `h = d_muᵀ H_x`: the stationary expectation of an update table whose
    /// `y`-th row is `H(x, y)ᵀ`.
    pub fn stationary_average(&self, h_x: &Matrix) -> Result<Vec<f64>, ChainError> {
        self.check_table(h_x)?;
        Ok(h_x.vecmat(&self.d_mu))
    }

    /// Solves the chain's Poisson equation for the update table `h_x`,
    /// returning `nu_x = D H_x` (one row per chain state).
    pub fn solve_poisson(&self, h_x: &Matrix) -> Result<Matrix, ChainError> {
        self.check_table(h_x)?;
        Ok(self.deviation.matmul(h_x))
    }

    /// `P f` for a per-state table `f` (used for `(P nu)(x, ·)`).
    pub fn apply_transition(&self, f: &Matrix) -> Result<Matrix, ChainError> {
        self.check_table(f)?;
        Ok(self.p.matmul(f))
    }

    fn check_table(&self, t: &Matrix) -> Result<(), ChainError> {
        if t.rows() != self.n_states() {
            return Err(ChainError::DimensionMismatch {
                context: format!(
                    "table has {} rows, chain has {} states",
                    t.rows(),
                    self.n_states()
                ),
            });
        }
        Ok(())
    }

    /// Inverse-CDF successor lookup: the first state whose cumulative row
    /// probability exceeds `u`.
    pub fn next_state_from_uniform(&self, current: usize, u: f64) -> usize {
        let n = self.n_states();
        let cdf = &self.row_cdf[current * n..(current + 1) * n];
        for (j, &c) in cdf.iter().enumerate() {
            if u < c {
                return j;
            }
        }
        // Rounding pushed u past the last boundary; take the last state with
        // positive probability.
        (0..n).rev().find(|&j| self.p.get(current, j) > 0.0).unwrap_or(n - 1)
    }

    /// Advances `state` by one transition and returns the new state index.
    pub fn sample_step(&self, state: &mut ChainState) -> usize {
        let u: f64 = state.rng.random();
        let next = self.next_state_from_uniform(state.current, u);
        state.current = next;
        state.step_count += 1;
        next
    }
}

/// Mutable cursor for one realization of a chain. One per worker; never
/// shared.
#[derive(Debug, Clone)]
pub struct ChainState {
    current: usize,
    rng: ChaCha8Rng,
    step_count: u64,
}

impl ChainState {
    pub fn new(start: usize, seed: u64) -> Self {
        Self { current: start, rng: ChaCha8Rng::seed_from_u64(seed), step_count: 0 }
    }

    pub fn current(&self) -> usize {
        self.current
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }
}

/// Max row-wise residual of the Poisson identity
/// `H(x,y) - h(x) - nu(x,y) + (P nu)(x,y)` for a given update table.
pub fn poisson_residual(chain: &FiniteChain, h_x: &Matrix) -> Result<f64, ChainError> {
    let nu = chain.solve_poisson(h_x)?;
    let p_nu = chain.apply_transition(&nu)?;
    let h = chain.stationary_average(h_x)?;
    let mut worst = 0.0f64;
    for y in 0..chain.n_states() {
        for i in 0..h_x.cols() {
            let r = h_x.get(y, i) - h[i] - nu.get(y, i) + p_nu.get(y, i);
            worst = worst.max(r.abs());
        }
    }
    Ok(worst)
}

/// Max residuals of the two deviation identities
/// `(I-P)D = I - e d_muᵀ` and `D e = 0`.
pub fn deviation_residuals(chain: &FiniteChain) -> (f64, f64) {
    let n = chain.n_states();
    let ones = vec![1.0; n];
    let lhs = Matrix::identity(n).sub(chain.transition()).matmul(chain.deviation());
    let rhs = Matrix::identity(n).sub(&Matrix::outer(&ones, chain.stationary()));
    let first = lhs.sub(&rhs).max_abs();
    let second = crate::linalg::sup_norm(&chain.deviation().matvec(&ones));
    (first, second)
}

/// Asymptotic variance of the additive functional `f` along the chain:
/// `2 <f_c, D f_c>_d - <f_c, f_c>_d` with `f_c = f - (dᵀf) e`.
///
/// This is the CLT variance, used to size statistical tolerances for
/// empirical visit-frequency checks.
pub fn asymptotic_variance(chain: &FiniteChain, f: &[f64]) -> f64 {
    let d = chain.stationary();
    let mean = dot(d, f);
    let centered: Vec<f64> = f.iter().map(|x| x - mean).collect();
    let df = chain.deviation().matvec(&centered);
    let weighted = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).zip(d).map(|((x, y), w)| w * x * y).sum()
    };
    2.0 * weighted(&centered, &df) - weighted(&centered, &centered)
}
