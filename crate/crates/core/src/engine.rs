//! The stochastic Krasnoselskii-Mann iteration engine.
//!
//! Runs
//!
//! ```text
//! x_{n+1} = x_n + alpha_{n+1} (H(x_n, Y_{n+1}) - x_n + e1_{n+1})
//! ```
//!
//! for a user-supplied update map `H` (an [`SkmOperator`]) driven by a finite
//! ergodic chain `{Y_n}`, with an optional additive-noise hook `e1`.
//!
//! In decomposition mode the engine additionally splits the sampling error
//! through the chain's Poisson solution `nu`:
//!
//! ```text
//! H(x_n, Y_{n+1}) - h(x_n) = M_{n+1} + e2_{n+1} + e3_{n+1}
//! M_{n+1}  = nu(x_n, Y_{n+2}) - (P nu)(x_n, Y_{n+1})      (martingale difference)
//! e2_{n+1} = nu(x_n, Y_{n+1}) - nu(x_{n+1}, Y_{n+2})      (telescoping shift)
//! e3_{n+1} = nu(x_{n+1}, Y_{n+2}) - nu(x_n, Y_{n+2})      (iterate drift)
//! ```
//!
//! and tracks the aggregate-noise recursion
//! `U_{n+1} = (1 - alpha_{n+1}) U_n + alpha_{n+1} (M_{n+1} + xi_{n+1})` with
//! `xi = e1 + e2 + e3` and `U_0 = 0`. The identity above is re-verified
//! numerically at every step; a violation aborts the run since it can only
//! mean a broken operator or chain.
//!
//! `nu(x, ·)` is recomputed from the deviation matrix at each decomposition
//! step via two operator sweeps, `H(x_n, ·)` and `H(x_{n+1}, ·)`; the sweep
//! at `x_{n+1}` is reused as the next step's `x_n` sweep. Decomposition is a
//! diagnostic mode, off by default.

use rand::RngExt;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::linalg::{euclidean_norm, sup_norm, Matrix};
use crate::markov::{ChainError, ChainState, FiniteChain};
use crate::schedules::{ScheduleError, ScheduleTable, StepSchedule};

/// Per-step tolerance for the Poisson reconstruction identity.
pub const RECONSTRUCTION_TOL: f64 = 1e-9;

/// Slack added to the iterate growth bound to absorb rounding.
const GROWTH_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EngineError {
    #[error("dimension mismatch: {context}")]
    DimensionMismatch { context: String },
    #[error("iterate became non-finite at step {step}")]
    NonFiniteIterate { step: u64 },
    #[error("configuration invalid: {context}")]
    InvalidConfig { context: String },
    #[error(
        "poisson reconstruction residual {residual:.3e} at step {step} exceeds {RECONSTRUCTION_TOL:.0e}"
    )]
    DecompositionInconsistent { step: u64, residual: f64 },
    #[error(transparent)]
    Chain(#[from] ChainError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
}

/// Norm used for residuals, noise magnitudes, and growth bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Norm {
    #[default]
    Sup,
    Euclidean,
}

impl Norm {
    pub fn apply(&self, v: &[f64]) -> f64 {
        match self {
            Norm::Sup => sup_norm(v),
            Norm::Euclidean => euclidean_norm(v),
        }
    }
}

/// A noisy update map `H(x, y)`, 1-Lipschitz in `x` for every chain state
/// `y`. Its stationary average `h(x) = Σ_y d_mu(y) H(x, y)` is then
/// nonexpansive, which is all the engine relies on.
pub trait SkmOperator: Sync {
    fn dimension(&self) -> usize;

    /// Writes `H(x, y)` into `out`.
    fn evaluate_into(&self, x: &[f64], y: usize, out: &mut [f64]);

    fn evaluate(&self, x: &[f64], y: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.dimension()];
        self.evaluate_into(x, y, &mut out);
        out
    }

    /// `h(x) = Σ_y d_mu(y) H(x, y)`.
    fn expected(&self, x: &[f64], d_mu: &[f64]) -> Vec<f64> {
        let mut acc = vec![0.0; self.dimension()];
        let mut buf = vec![0.0; self.dimension()];
        for (y, &w) in d_mu.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            self.evaluate_into(x, y, &mut buf);
            for (a, b) in acc.iter_mut().zip(&buf) {
                *a += w * b;
            }
        }
        acc
    }

    /// Linear-growth constant `C_H = max_y ||H(0, y)||`.
    fn growth_constant(&self, n_states: usize, norm: Norm) -> f64 {
        let zero = vec![0.0; self.dimension()];
        let mut buf = vec![0.0; self.dimension()];
        let mut worst = 0.0f64;
        for y in 0..n_states {
            self.evaluate_into(&zero, y, &mut buf);
            worst = worst.max(norm.apply(&buf));
        }
        worst
    }
}

/// Source of the additive noise `e1_{n+1}`, consulted once per step with the
/// pre-update iterate and the freshly sampled chain state.
pub trait NoiseSource: Send {
    /// Writes `e1_{n+1}` into `out`; `step` is the zero-based index `n`.
    fn sample_into(&mut self, step: u64, x: &[f64], y_next: usize, out: &mut [f64]);
}

/// The default: no additive noise.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroNoise;

impl NoiseSource for ZeroNoise {
    fn sample_into(&mut self, _step: u64, _x: &[f64], _y_next: usize, out: &mut [f64]) {
        out.fill(0.0);
    }
}

/// Geometric checkpoint grid `start, start*ratio, ...` capped at and always
/// including `horizon`.
pub fn geometric_checkpoints(start: u64, ratio: u64, horizon: u64) -> Vec<u64> {
    let mut out = Vec::new();
    let mut c = start.max(1);
    while c < horizon {
        out.push(c);
        match c.checked_mul(ratio) {
            Some(next) if next > c => c = next,
            _ => break,
        }
    }
    out.push(horizon);
    out
}

#[derive(Debug, Clone)]
pub struct SkmRunConfig {
    pub horizon: u64,
    pub schedule: StepSchedule,
    pub norm: Norm,
    /// Sorted checkpoint steps within `[1, horizon]`.
    pub checkpoints: Vec<u64>,
    pub decomposition: bool,
    /// Retain per-step `M_k + xi_k` for the first `noise_history_cap` steps
    /// (decomposition mode only); feeds the telescoped `U_n` cross-check.
    pub record_noise_history: bool,
    pub noise_history_cap: u64,
    pub seed: u64,
    /// Initial iterate; zero vector when absent.
    pub x0: Option<Vec<f64>>,
    /// Initial chain state `Y_0`.
    pub y0: usize,
}

impl SkmRunConfig {
    pub fn new(horizon: u64, b: f64, seed: u64) -> Result<Self, EngineError> {
        let schedule = StepSchedule::primary(b)?;
        Ok(Self {
            horizon,
            schedule,
            norm: Norm::Sup,
            checkpoints: geometric_checkpoints(16, 2, horizon),
            decomposition: false,
            record_noise_history: false,
            noise_history_cap: 1_000,
            seed,
            x0: None,
            y0: 0,
        })
    }

    fn validate(&self, dimension: usize) -> Result<(), EngineError> {
        if self.horizon < 1 {
            return Err(EngineError::InvalidConfig { context: "horizon must be >= 1".into() });
        }
        if !self.checkpoints.windows(2).all(|w| w[0] < w[1]) {
            return Err(EngineError::InvalidConfig {
                context: "checkpoints must be strictly increasing".into(),
            });
        }
        if let (Some(&first), Some(&last)) = (self.checkpoints.first(), self.checkpoints.last()) {
            if first < 1 || last > self.horizon {
                return Err(EngineError::InvalidConfig {
                    context: format!(
                        "checkpoints must lie in [1, {}], got [{first}, {last}]",
                        self.horizon
                    ),
                });
            }
        }
        if let Some(x0) = &self.x0 {
            if x0.len() != dimension {
                return Err(EngineError::DimensionMismatch {
                    context: format!("x0 has length {}, operator dimension is {dimension}", x0.len()),
                });
            }
        }
        Ok(())
    }
}

/// One checkpoint row. Decomposition fields are `None` when the mode is off.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointRow {
    pub n: u64,
    pub tau: f64,
    /// `||x_n - h(x_n)||`.
    pub residual: f64,
    pub norm_u: Option<f64>,
    pub norm_m: Option<f64>,
    pub norm_e1: Option<f64>,
    pub norm_e2: Option<f64>,
    pub norm_e3: Option<f64>,
}

/// Per-step `M_k + xi_k` vectors, `k = 1, 2, ...` up to the configured cap.
#[derive(Debug, Clone, Default)]
pub struct NoiseHistory {
    pub per_step: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct TrajectoryRecord {
    pub seed: u64,
    pub checkpoints: Vec<CheckpointRow>,
    pub final_x: Vec<f64>,
    pub final_u: Option<Vec<f64>>,
    /// Sampled 1-Lipschitz spot-check outcome; a failure is a warning, not an
    /// abort, since sampling cannot prove the property either way.
    pub lipschitz_ok: bool,
    /// Minimum over checkpoints of (growth bound - ||x_n||); nonnegative when
    /// the iterate-growth inequality held throughout.
    pub growth_margin_min: f64,
    pub noise_history: Option<NoiseHistory>,
}

/// One iteration step: `x + alpha (H(x, y_next) - x + e1)`.
pub fn skm_step(
    x: &[f64],
    y_next: usize,
    alpha: f64,
    e1: &[f64],
    op: &dyn SkmOperator,
) -> Result<Vec<f64>, EngineError> {
    if x.len() != op.dimension() || e1.len() != x.len() {
        return Err(EngineError::DimensionMismatch {
            context: format!(
                "x has length {}, e1 has length {}, operator dimension is {}",
                x.len(),
                e1.len(),
                op.dimension()
            ),
        });
    }
    let h = op.evaluate(x, y_next);
    Ok(x.iter()
        .zip(&h)
        .zip(e1)
        .map(|((xi, hi), ei)| xi + alpha * (hi - xi + ei))
        .collect())
}

/// `||x - h(x)||` under `norm`.
pub fn residual(x: &[f64], op: &dyn SkmOperator, d_mu: &[f64], norm: Norm) -> f64 {
    let h = op.expected(x, d_mu);
    let diff: Vec<f64> = x.iter().zip(&h).map(|(a, b)| a - b).collect();
    norm.apply(&diff)
}

/// `U_{n+1} = (1 - alpha) U_n + alpha (M + xi)`.
pub fn update_u(u: &[f64], alpha: f64, martingale: &[f64], xi: &[f64]) -> Vec<f64> {
    u.iter()
        .zip(martingale)
        .zip(xi)
        .map(|((ui, mi), xii)| (1.0 - alpha) * ui + alpha * (mi + xii))
        .collect()
}

/// The three Poisson noise components of one step.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseTerms {
    pub martingale: Vec<f64>,
    pub telescoping_shift: Vec<f64>,
    pub iterate_drift: Vec<f64>,
}

impl NoiseTerms {
    /// `M + e2 + e3`, which must reproduce `H(x_n, Y_{n+1}) - h(x_n)`.
    pub fn total(&self) -> Vec<f64> {
        self.martingale
            .iter()
            .zip(&self.telescoping_shift)
            .zip(&self.iterate_drift)
            .map(|((m, e2), e3)| m + e2 + e3)
            .collect()
    }
}

/// Splits one step's sampling error into `(M, e2, e3)` from scratch.
///
/// Both operator sweeps are recomputed here; the engine's in-loop version
/// reuses the previous sweep but computes identical quantities.
pub fn decompose_noise(
    x_n: &[f64],
    x_next: &[f64],
    y_next: usize,
    y_next2: usize,
    op: &dyn SkmOperator,
    chain: &FiniteChain,
) -> Result<NoiseTerms, EngineError> {
    if x_n.len() != op.dimension() || x_next.len() != op.dimension() {
        return Err(EngineError::DimensionMismatch {
            context: format!(
                "iterates have lengths {} and {}, operator dimension is {}",
                x_n.len(),
                x_next.len(),
                op.dimension()
            ),
        });
    }
    let table_n = sweep(op, chain.n_states(), x_n);
    let table_next = sweep(op, chain.n_states(), x_next);
    let nu_n = chain.solve_poisson(&table_n)?;
    let nu_next = chain.solve_poisson(&table_next)?;
    let p_nu_n = chain.apply_transition(&nu_n)?;

    let d = op.dimension();
    let mut martingale = vec![0.0; d];
    let mut telescoping_shift = vec![0.0; d];
    let mut iterate_drift = vec![0.0; d];
    for i in 0..d {
        martingale[i] = nu_n.get(y_next2, i) - p_nu_n.get(y_next, i);
        telescoping_shift[i] = nu_n.get(y_next, i) - nu_next.get(y_next2, i);
        iterate_drift[i] = nu_next.get(y_next2, i) - nu_n.get(y_next2, i);
    }
    Ok(NoiseTerms { martingale, telescoping_shift, iterate_drift })
}

fn sweep(op: &dyn SkmOperator, n_states: usize, x: &[f64]) -> Matrix {
    let mut table = Matrix::zeros(n_states, op.dimension());
    for y in 0..n_states {
        op.evaluate_into(x, y, table.row_mut(y));
    }
    table
}

/// Reconstructs `U_n` from scratch as `Σ_{k=1}^n alpha_{k,n} (M_k + xi_k)`;
/// an independent route to the recursion the engine maintains.
pub fn telescoped_u(
    history: &NoiseHistory,
    table: &ScheduleTable,
    n: u64,
) -> Result<Vec<f64>, EngineError> {
    if n as usize > history.per_step.len() {
        return Err(EngineError::InvalidConfig {
            context: format!("history holds {} steps, asked for {n}", history.per_step.len()),
        });
    }
    let d = history.per_step.first().map_or(0, Vec::len);
    let mut acc = vec![0.0; d];
    for k in 1..=n {
        let w = table.alpha_kn(k, n)?;
        for (a, v) in acc.iter_mut().zip(&history.per_step[k as usize - 1]) {
            *a += w * v;
        }
    }
    Ok(acc)
}

fn spot_check_lipschitz(op: &dyn SkmOperator, n_states: usize, norm: Norm, seed: u64) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let d = op.dimension();
    let mut a = vec![0.0; d];
    let mut b = vec![0.0; d];
    let mut ha = vec![0.0; d];
    let mut hb = vec![0.0; d];
    for _ in 0..100 {
        for i in 0..d {
            a[i] = rng.random::<f64>() * 10.0 - 5.0;
            b[i] = rng.random::<f64>() * 10.0 - 5.0;
        }
        let y = rng.random_range(0..n_states);
        op.evaluate_into(&a, y, &mut ha);
        op.evaluate_into(&b, y, &mut hb);
        let dh: Vec<f64> = ha.iter().zip(&hb).map(|(x, y)| x - y).collect();
        let dx: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        if norm.apply(&dh) > norm.apply(&dx) * (1.0 + 1e-12) + 1e-12 {
            return false;
        }
    }
    true
}

/// Runs the iteration for `config.horizon` steps and records checkpoint
/// diagnostics. See the module docs for the decomposition quantities.
pub fn run(
    op: &dyn SkmOperator,
    chain: &FiniteChain,
    noise: &mut dyn NoiseSource,
    config: &SkmRunConfig,
) -> Result<TrajectoryRecord, EngineError> {
    let d = op.dimension();
    config.validate(d)?;
    if config.y0 >= chain.n_states() {
        return Err(EngineError::InvalidConfig {
            context: format!("y0 = {} out of range for {} states", config.y0, chain.n_states()),
        });
    }

    let lipschitz_ok = spot_check_lipschitz(op, chain.n_states(), config.norm, config.seed);

    let mut x = config.x0.clone().unwrap_or_else(|| vec![0.0; d]);
    let x0_norm = config.norm.apply(&x);
    let growth_c = op.growth_constant(chain.n_states(), config.norm);

    let mut state = ChainState::new(config.y0, config.seed);
    let mut y_next = chain.sample_step(&mut state); // Y_1

    let mut e1 = vec![0.0; d];
    let mut h_at_y = vec![0.0; d];
    let mut x_new = vec![0.0; d];

    // Decomposition workspace.
    let decomp = config.decomposition;
    let p_dev = decomp.then(|| chain.transition().matmul(chain.deviation()));
    let mut sweep_curr = decomp.then(|| sweep(op, chain.n_states(), &x));
    let mut u = vec![0.0; d];
    let mut m_term = vec![0.0; d];
    let mut e2_term = vec![0.0; d];
    let mut e3_term = vec![0.0; d];
    let mut history =
        (decomp && config.record_noise_history).then(NoiseHistory::default);

    let mut sum_alpha = 0.0;
    let mut sum_alpha_e1 = 0.0;
    let mut tau = 0.0;
    let mut growth_margin_min = f64::INFINITY;
    let mut rows = Vec::with_capacity(config.checkpoints.len());
    let mut checkpoint_iter = config.checkpoints.iter().copied().peekable();

    for n in 0..config.horizon {
        let step = n + 1;
        let alpha = config.schedule.rate(step);
        noise.sample_into(n, &x, y_next, &mut e1);
        op.evaluate_into(&x, y_next, &mut h_at_y);
        for i in 0..d {
            x_new[i] = x[i] + alpha * (h_at_y[i] - x[i] + e1[i]);
        }
        if x_new.iter().any(|v| !v.is_finite()) {
            return Err(EngineError::NonFiniteIterate { step });
        }
        let y_next2 = chain.sample_step(&mut state); // Y_{n+2}

        if decomp {
            let sweep_next = sweep(op, chain.n_states(), &x_new);
            let table_curr = sweep_curr.as_ref().expect("decomposition sweep present");
            let pd = p_dev.as_ref().expect("P*D cached");
            let dev = chain.deviation();
            // nu rows against the current sweep.
            weighted_row_sum(dev.row(y_next2), table_curr, &mut m_term);
            let mut p_nu_row = vec![0.0; d];
            weighted_row_sum(pd.row(y_next), table_curr, &mut p_nu_row);
            let mut nu_curr_ynext = vec![0.0; d];
            weighted_row_sum(dev.row(y_next), table_curr, &mut nu_curr_ynext);
            let mut nu_next_ynext2 = vec![0.0; d];
            weighted_row_sum(dev.row(y_next2), &sweep_next, &mut nu_next_ynext2);
            for i in 0..d {
                let nu_curr_ynext2 = m_term[i];
                m_term[i] -= p_nu_row[i];
                e2_term[i] = nu_curr_ynext[i] - nu_next_ynext2[i];
                e3_term[i] = nu_next_ynext2[i] - nu_curr_ynext2;
            }
            // h(x_n) and the reconstruction identity.
            let h_bar = table_curr.vecmat(chain.stationary());
            let mut recon_err = 0.0f64;
            for i in 0..d {
                let lhs = h_at_y[i] - h_bar[i];
                let rhs = m_term[i] + e2_term[i] + e3_term[i];
                recon_err = recon_err.max((lhs - rhs).abs());
            }
            if recon_err > RECONSTRUCTION_TOL {
                return Err(EngineError::DecompositionInconsistent { step, residual: recon_err });
            }
            for i in 0..d {
                let xi = e1[i] + e2_term[i] + e3_term[i];
                u[i] = (1.0 - alpha) * u[i] + alpha * (m_term[i] + xi);
            }
            if let Some(h) = history.as_mut() {
                if step <= config.noise_history_cap {
                    let m_plus_xi: Vec<f64> = (0..d)
                        .map(|i| m_term[i] + e1[i] + e2_term[i] + e3_term[i])
                        .collect();
                    h.per_step.push(m_plus_xi);
                }
            }
            sweep_curr = Some(sweep_next);
        }

        std::mem::swap(&mut x, &mut x_new);
        y_next = y_next2;
        sum_alpha += alpha;
        sum_alpha_e1 += alpha * config.norm.apply(&e1);
        tau += alpha * (1.0 - alpha);

        if checkpoint_iter.peek() == Some(&step) {
            checkpoint_iter.next();
            let res = residual(&x, op, chain.stationary(), config.norm);
            let bound = x0_norm + growth_c * sum_alpha + sum_alpha_e1;
            let margin = bound + GROWTH_TOL * (1.0 + bound) - config.norm.apply(&x);
            growth_margin_min = growth_margin_min.min(margin);
            rows.push(CheckpointRow {
                n: step,
                tau,
                residual: res,
                norm_u: decomp.then(|| config.norm.apply(&u)),
                norm_m: decomp.then(|| config.norm.apply(&m_term)),
                norm_e1: decomp.then(|| config.norm.apply(&e1)),
                norm_e2: decomp.then(|| config.norm.apply(&e2_term)),
                norm_e3: decomp.then(|| config.norm.apply(&e3_term)),
            });
        }
    }

    Ok(TrajectoryRecord {
        seed: config.seed,
        checkpoints: rows,
        final_x: x,
        final_u: decomp.then_some(u),
        lipschitz_ok,
        growth_margin_min,
        noise_history: history,
    })
}

/// `out[i] = Σ_y weights[y] table[y][i]`.
fn weighted_row_sum(weights: &[f64], table: &Matrix, out: &mut [f64]) {
    out.fill(0.0);
    for (y, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        for (o, v) in out.iter_mut().zip(table.row(y)) {
            *o += w * v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::markov::FiniteChain;

    /// `H(x, y) = x/2 + c_y` with stationary-centered offsets: h(x) = x/2.
    struct HalvingOperator {
        offsets: Vec<Vec<f64>>,
    }

    impl SkmOperator for HalvingOperator {
        fn dimension(&self) -> usize {
            self.offsets[0].len()
        }
        fn evaluate_into(&self, x: &[f64], y: usize, out: &mut [f64]) {
            for i in 0..x.len() {
                out[i] = 0.5 * x[i] + self.offsets[y][i];
            }
        }
    }

    /// Identity map: every point is fixed.
    struct IdentityOperator {
        dim: usize,
    }

    impl SkmOperator for IdentityOperator {
        fn dimension(&self) -> usize {
            self.dim
        }
        fn evaluate_into(&self, x: &[f64], _y: usize, out: &mut [f64]) {
            out.copy_from_slice(x);
        }
    }

    fn two_state_chain() -> FiniteChain {
        FiniteChain::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap()
    }

    fn centered_halving(chain: &FiniteChain, scale: f64) -> HalvingOperator {
        // Offsets c_y with Σ d_mu(y) c_y = 0 keep h(x) = x/2 exactly.
        let d = chain.stationary();
        let raw = [1.0, -0.25];
        let mean: f64 = d.iter().zip(raw).map(|(w, c)| w * c).sum();
        HalvingOperator {
            offsets: raw.iter().map(|c| vec![(c - mean) * scale]).collect(),
        }
    }

    #[test]
    fn skm_step_alpha_zero_is_identity() {
        let op = IdentityOperator { dim: 3 };
        let x = [1.0, -2.0, 0.5];
        let out = skm_step(&x, 0, 0.0, &[0.0; 3], &op).unwrap();
        assert_eq!(out, x.to_vec());
    }

    #[test]
    fn skm_step_fixed_point_stays() {
        let op = IdentityOperator { dim: 2 };
        let x = [3.0, 4.0];
        let out = skm_step(&x, 1, 0.7, &[0.0; 2], &op).unwrap();
        assert_eq!(out, x.to_vec());
    }

    #[test]
    fn skm_step_halving_arithmetic() {
        // H(x) = x/2, x = 1, alpha = 1/2 -> 0.75.
        let op = HalvingOperator { offsets: vec![vec![0.0], vec![0.0]] };
        let out = skm_step(&[1.0], 0, 0.5, &[0.0], &op).unwrap();
        assert!((out[0] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn skm_step_dimension_mismatch() {
        let op = IdentityOperator { dim: 2 };
        assert!(skm_step(&[1.0], 0, 0.5, &[0.0], &op).is_err());
    }

    #[test]
    fn residual_under_both_norms() {
        // h(x) = x/2, so x - h(x) = x/2.
        let chain = two_state_chain();
        let op = HalvingOperator { offsets: vec![vec![0.0, 0.0], vec![0.0, 0.0]] };
        let x = [2.0, 0.0];
        assert!((residual(&x, &op, chain.stationary(), Norm::Sup) - 1.0).abs() < 1e-15);
        let x = [2.0, 2.0];
        let want = (2.0f64).sqrt();
        assert!((residual(&x, &op, chain.stationary(), Norm::Euclidean) - want).abs() < 1e-15);
    }

    #[test]
    fn run_identity_operator_keeps_x0() {
        let chain = two_state_chain();
        let op = IdentityOperator { dim: 2 };
        let mut config = SkmRunConfig::new(500, 0.9, 7).unwrap();
        config.x0 = Some(vec![1.5, -2.5]);
        let record = run(&op, &chain, &mut ZeroNoise, &config).unwrap();
        assert_eq!(record.final_x, vec![1.5, -2.5]);
        for row in &record.checkpoints {
            assert_eq!(row.residual, 0.0);
        }
    }

    #[test]
    fn run_halving_matches_closed_form() {
        // No noise dependence: x_n = x_0 Π (1 - alpha_k / 2) exactly, so the
        // residual is |x_n| / 2. The product drives it below 1e-6 by 1e6
        // steps at b = 0.9.
        let horizon = 1_000_000u64;
        let chain = two_state_chain();
        let op = HalvingOperator { offsets: vec![vec![0.0], vec![0.0]] };
        let mut config = SkmRunConfig::new(horizon, 0.9, 3).unwrap();
        config.x0 = Some(vec![1.0]);
        let record = run(&op, &chain, &mut ZeroNoise, &config).unwrap();

        let schedule = StepSchedule::primary(0.9).unwrap();
        let mut expected = 1.0;
        let mut idx = 0;
        let mut residuals = Vec::new();
        for n in 1..=horizon {
            expected *= 1.0 - schedule.rate(n) / 2.0;
            if idx < config.checkpoints.len() && config.checkpoints[idx] == n {
                residuals.push(expected.abs() * 0.5);
                idx += 1;
            }
        }
        for (row, want) in record.checkpoints.iter().zip(&residuals) {
            let rel = (row.residual - want).abs() / want;
            assert!(rel < 1e-9, "n={}: {} vs {want}", row.n, row.residual);
        }
        for pair in record.checkpoints.windows(2) {
            assert!(pair[1].residual < pair[0].residual);
        }
        assert!(record.checkpoints.last().unwrap().residual < 1e-6);
        assert!(record.lipschitz_ok);
        assert!(record.growth_margin_min >= 0.0);
    }

    #[test]
    fn run_is_deterministic() {
        let chain = two_state_chain();
        let op = centered_halving(&chain, 1.0);
        let mut config = SkmRunConfig::new(2_000, 0.9, 11).unwrap();
        config.decomposition = true;
        let a = run(&op, &chain, &mut ZeroNoise, &config).unwrap();
        let b = run(&op, &chain, &mut ZeroNoise, &config).unwrap();
        assert_eq!(a.final_x, b.final_x);
        assert_eq!(a.checkpoints, b.checkpoints);
    }

    #[test]
    fn decomposition_matches_standalone() {
        let chain = two_state_chain();
        let op = centered_halving(&chain, 1.0);
        // One manual step with known states.
        let x = vec![0.4];
        let x_next = skm_step(&x, 1, 0.3, &[0.0], &op).unwrap();
        let terms = decompose_noise(&x, &x_next, 1, 0, &op, &chain).unwrap();
        let h_bar = op.expected(&x, chain.stationary());
        let h_y = op.evaluate(&x, 1);
        let total = terms.total();
        assert!((h_y[0] - h_bar[0] - total[0]).abs() < 1e-12);
    }

    #[test]
    fn run_internal_terms_match_standalone_route() {
        // Replay a one-step run by hand; the reconstruction identity only
        // constrains the sum, so pin each term's norm separately.
        let chain = FiniteChain::from_rows(&[vec![0.6, 0.4], vec![0.3, 0.7]]).unwrap();
        let op = centered_halving(&chain, 2.0);
        let seed = 99;
        let mut config = SkmRunConfig::new(1, 0.9, seed).unwrap();
        config.decomposition = true;
        config.checkpoints = vec![1];
        let record = run(&op, &chain, &mut ZeroNoise, &config).unwrap();
        let row = &record.checkpoints[0];

        let mut state = crate::markov::ChainState::new(0, seed);
        let y1 = chain.sample_step(&mut state);
        let y2 = chain.sample_step(&mut state);
        let alpha = config.schedule.rate(1);
        let x0 = vec![0.0];
        let x1 = skm_step(&x0, y1, alpha, &[0.0], &op).unwrap();
        let terms = decompose_noise(&x0, &x1, y1, y2, &op, &chain).unwrap();
        let norm = |v: &[f64]| Norm::Sup.apply(v);
        assert!((row.norm_m.unwrap() - norm(&terms.martingale)).abs() < 1e-14);
        assert!((row.norm_e2.unwrap() - norm(&terms.telescoping_shift)).abs() < 1e-14);
        assert!((row.norm_e3.unwrap() - norm(&terms.iterate_drift)).abs() < 1e-14);
        let xi: Vec<f64> = terms
            .telescoping_shift
            .iter()
            .zip(&terms.iterate_drift)
            .map(|(a, b)| a + b)
            .collect();
        let u1 = update_u(&[0.0], alpha, &terms.martingale, &xi);
        assert!((row.norm_u.unwrap() - norm(&u1)).abs() < 1e-14);
        assert_eq!(record.final_x, x1);
    }

    #[test]
    fn decomposition_iid_chain_has_zero_p_nu() {
        // For P = e dᵀ the deviation matrix kills (P nu), so M = nu(x_n, Y_{n+2}).
        let chain = two_state_chain();
        let op = centered_halving(&chain, 1.0);
        let x = vec![1.0];
        let x_next = vec![0.8];
        let terms = decompose_noise(&x, &x_next, 0, 1, &op, &chain).unwrap();
        let table = Matrix::from_rows(&[op.evaluate(&x, 0), op.evaluate(&x, 1)]).unwrap();
        let nu = chain.solve_poisson(&table).unwrap();
        assert!((terms.martingale[0] - nu.get(1, 0)).abs() < 1e-12);
    }

    #[test]
    fn decomposition_alpha_zero_step() {
        // x_{n+1} = x_n: e3 = 0 and e2 = nu(x, Y_{n+1}) - nu(x, Y_{n+2}).
        let chain = FiniteChain::from_rows(&[vec![0.7, 0.3], vec![0.2, 0.8]]).unwrap();
        let op = centered_halving(&chain, 1.0);
        let x = vec![0.6];
        let terms = decompose_noise(&x, &x, 0, 1, &op, &chain).unwrap();
        assert_eq!(terms.iterate_drift, vec![0.0]);
        let table = Matrix::from_rows(&[op.evaluate(&x, 0), op.evaluate(&x, 1)]).unwrap();
        let nu = chain.solve_poisson(&table).unwrap();
        assert!((terms.telescoping_shift[0] - (nu.get(0, 0) - nu.get(1, 0))).abs() < 1e-12);
    }

    #[test]
    fn martingale_terms_have_zero_conditional_mean() {
        // Group M_{n+1} by the conditioning state Y_{n+1}; each group mean
        // should vanish within 3 standard errors.
        let chain = FiniteChain::from_rows(&[vec![0.6, 0.4], vec![0.3, 0.7]]).unwrap();
        let op = centered_halving(&chain, 2.0);
        let mut config = SkmRunConfig::new(100_000, 0.9, 17).unwrap();
        config.decomposition = true;
        config.record_noise_history = false;
        // Rerun manually to collect (y_next, M) pairs via the standalone path.
        let mut state = crate::markov::ChainState::new(0, 17);
        let mut y_next = chain.sample_step(&mut state);
        let mut x = vec![0.0];
        let schedule = config.schedule;
        let mut sums = [0.0f64; 2];
        let mut sqs = [0.0f64; 2];
        let mut counts = [0u64; 2];
        for n in 0..100_000u64 {
            let alpha = schedule.rate(n + 1);
            let x_next = skm_step(&x, y_next, alpha, &[0.0], &op).unwrap();
            let y_next2 = chain.sample_step(&mut state);
            let terms = decompose_noise(&x, &x_next, y_next, y_next2, &op, &chain).unwrap();
            sums[y_next] += terms.martingale[0];
            sqs[y_next] += terms.martingale[0] * terms.martingale[0];
            counts[y_next] += 1;
            x = x_next;
            y_next = y_next2;
        }
        for y in 0..2 {
            let n = counts[y] as f64;
            let mean = sums[y] / n;
            let var = (sqs[y] / n - mean * mean).max(0.0);
            let se = (var / n).sqrt();
            assert!(
                mean.abs() < 3.0 * se,
                "conditional mean {mean:.3e} exceeds 3 se {:.3e} for y={y}",
                3.0 * se
            );
        }
    }

    #[test]
    fn update_u_zero_noise_stays_zero() {
        let mut u = vec![0.0; 3];
        for step in 1..50u64 {
            let alpha = StepSchedule::primary(0.9).unwrap().rate(step);
            u = update_u(&u, alpha, &[0.0; 3], &[0.0; 3]);
        }
        assert_eq!(u, vec![0.0; 3]);
    }

    #[test]
    fn telescoped_u_matches_recursion() {
        let chain = FiniteChain::from_rows(&[vec![0.6, 0.4], vec![0.3, 0.7]]).unwrap();
        let op = centered_halving(&chain, 2.0);
        let horizon = 1_000u64;
        let mut config = SkmRunConfig::new(horizon, 0.9, 23).unwrap();
        config.decomposition = true;
        config.record_noise_history = true;
        config.noise_history_cap = horizon;
        config.checkpoints = vec![horizon];
        let record = run(&op, &chain, &mut ZeroNoise, &config).unwrap();
        let table = ScheduleTable::new(config.schedule, horizon).unwrap();
        let history = record.noise_history.as_ref().unwrap();
        let reconstructed = telescoped_u(history, &table, horizon).unwrap();
        let direct = record.final_u.as_ref().unwrap();
        for (a, b) in reconstructed.iter().zip(direct) {
            assert!((a - b).abs() < 1e-8, "telescoped {a} vs recursive {b}");
        }
    }

    #[test]
    fn nonfinite_iterate_aborts_with_step() {
        struct Exploding;
        impl SkmOperator for Exploding {
            fn dimension(&self) -> usize {
                1
            }
            fn evaluate_into(&self, x: &[f64], _y: usize, out: &mut [f64]) {
                out[0] = if x[0] > 0.5 { f64::INFINITY } else { x[0] + 10.0 };
            }
        }
        let chain = two_state_chain();
        let config = SkmRunConfig::new(100, 0.9, 1).unwrap();
        match run(&Exploding, &chain, &mut ZeroNoise, &config) {
            Err(EngineError::NonFiniteIterate { step }) => assert!(step >= 1),
            other => panic!("expected NonFiniteIterate, got {other:?}"),
        }
    }

    #[test]
    fn lipschitz_warning_for_expanding_operator() {
        struct Doubling;
        impl SkmOperator for Doubling {
            fn dimension(&self) -> usize {
                1
            }
            fn evaluate_into(&self, x: &[f64], _y: usize, out: &mut [f64]) {
                out[0] = 1.9 * x[0];
            }
        }
        let chain = two_state_chain();
        let mut config = SkmRunConfig::new(10, 0.9, 1).unwrap();
        config.checkpoints = vec![10];
        let record = run(&Doubling, &chain, &mut ZeroNoise, &config).unwrap();
        assert!(!record.lipschitz_ok);
    }

    #[test]
    fn expected_nonexpansive_on_random_pairs() {
        let chain = FiniteChain::from_rows(&[vec![0.6, 0.4], vec![0.3, 0.7]]).unwrap();
        let op = centered_halving(&chain, 3.0);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let x = vec![rng.random::<f64>() * 8.0 - 4.0];
            let y = vec![rng.random::<f64>() * 8.0 - 4.0];
            let hx = op.expected(&x, chain.stationary());
            let hy = op.expected(&y, chain.stationary());
            let lhs = (hx[0] - hy[0]).abs();
            let rhs = (x[0] - y[0]).abs();
            assert!(lhs <= rhs + 1e-12);
        }
    }

    #[test]
    fn growth_constant_is_max_norm_at_zero() {
        let chain = two_state_chain();
        let op = centered_halving(&chain, 2.0);
        let by_hand = (0..2)
            .map(|y| sup_norm(&op.evaluate(&[0.0], y)))
            .fold(0.0f64, f64::max);
        assert_eq!(op.growth_constant(2, Norm::Sup), by_hand);
    }

    #[test]
    fn geometric_checkpoints_cover_horizon() {
        assert_eq!(geometric_checkpoints(16, 2, 100), vec![16, 32, 64, 100]);
        assert_eq!(geometric_checkpoints(16, 2, 8), vec![8]);
        assert_eq!(geometric_checkpoints(16, 2, 16), vec![16]);
        let cps = geometric_checkpoints(16, 2, 1_000_000);
        assert_eq!(*cps.last().unwrap(), 1_000_000);
        assert!(cps.windows(2).all(|w| w[0] < w[1]));
    }
}
