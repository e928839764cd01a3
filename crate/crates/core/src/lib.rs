//! A numerical laboratory for stochastic Krasnoselskii-Mann iterations
//! driven by finite Markov chains.
//!
//! The crate simulates iterations of the form
//!
//! ```text
//! x_{n+1} = x_n + alpha_{n+1} (H(x_n, Y_{n+1}) - x_n + e1_{n+1})
//! ```
//!
//! where `{Y_n}` is an ergodic finite chain, `H` is 1-Lipschitz in `x`, and
//! the step sizes follow `alpha_n = 1/(n+1)^b` with `b` in `(0.8, 1]`. The
//! stationary average `h(x) = Σ_y d_mu(y) H(x, y)` is then nonexpansive, and
//! the iterates track its fixed points. The modules split the problem the
//! way the machinery does:
//!
//! - [`linalg`]: small dense matrices and LU solves.
//! - [`markov`]: validated ergodic chains, stationary distributions,
//!   deviation matrices, Poisson-equation solving, and seeded sampling.
//! - [`schedules`]: the step-size family, the `alpha_{k,n}` / `tau_n`
//!   shorthands, and boundedness diagnostics for the series they generate.
//! - [`engine`]: the iteration loop, fixed-point residuals, and the
//!   martingale/drift decomposition of the sampling noise with the
//!   aggregate-noise recursion `U_n`.
//! - [`mdp`]: average-reward evaluation oracles (gain, bias, Bellman
//!   residual, distance to the solution line) for tabular MDPs.
//! - [`td`]: tabular average-reward TD, both as the online update and as an
//!   SKM iteration over the augmented chain of transition triples.
//! - [`experiments`]: seeded Monte Carlo sweeps, rate reports, and the
//!   `U_n -> 0` diagnostic.

// Indexed loops read better than zips in the dense kernels here.
#![allow(clippy::needless_range_loop)]

pub mod engine;
pub mod experiments;
pub mod linalg;
pub mod markov;
pub mod mdp;
pub mod schedules;
pub mod td;

pub use engine::{Norm, SkmOperator, SkmRunConfig, TrajectoryRecord};
pub use linalg::Matrix;
pub use markov::{ChainState, FiniteChain};
pub use mdp::{EvalOracle, PolicySpec, TabularMdp};
pub use schedules::{ScheduleTable, StepSchedule};
pub use td::{AugmentedChain, TdOperator, TdState};
