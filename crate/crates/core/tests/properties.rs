//! Property tests for the structural invariants: stochasticity, the
//! deviation and Poisson identities, schedule monotonicity, operator
//! Lipschitz bounds, and the compact-form equivalence of the TD update.

use proptest::prelude::*;

use skmlab_core::engine::{self, Norm, SkmOperator, SkmRunConfig, ZeroNoise};
use skmlab_core::linalg::{sup_norm, Matrix};
use skmlab_core::markov::{deviation_residuals, poisson_residual, FiniteChain};
use skmlab_core::mdp::{span, EvalOracle, PolicySpec, TabularMdp};
use skmlab_core::schedules::{sigma, ScheduleTable, StepSchedule};
use skmlab_core::td::{run_td, TdOperator, TdRunConfig};

/// Strictly positive stochastic rows: raw positive weights normalized and
/// mixed toward uniform, so every chain is irreducible and aperiodic.
fn chain_strategy(max_states: usize) -> impl Strategy<Value = FiniteChain> {
    (2..=max_states)
        .prop_flat_map(|n| {
            (
                proptest::collection::vec(
                    proptest::collection::vec(0.05f64..1.0, n),
                    n,
                ),
                Just(n),
            )
        })
        .prop_map(|(raw, n)| {
            let rows: Vec<Vec<f64>> = raw
                .into_iter()
                .map(|row| {
                    let sum: f64 = row.iter().sum();
                    row.iter().map(|v| 0.9 * v / sum + 0.1 / n as f64).collect()
                })
                .collect();
            FiniteChain::from_rows(&rows).expect("mixed positive rows form an ergodic chain")
        })
}

fn table_strategy(n: usize, d: usize) -> impl Strategy<Value = Matrix> {
    proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, d), n)
        .prop_map(|rows| Matrix::from_rows(&rows).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn stationary_is_invariant_and_positive(chain in chain_strategy(12)) {
        let d = chain.stationary();
        let dp = chain.transition().vecmat(d);
        for (a, b) in dp.iter().zip(d) {
            prop_assert!((a - b).abs() < 1e-10);
        }
        prop_assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(d.iter().all(|&x| x > 0.0));
    }

    #[test]
    fn deviation_identities(chain in chain_strategy(12)) {
        let (a, b) = deviation_residuals(&chain);
        prop_assert!(a < 1e-10, "(I-P)D residual {a:.3e}");
        prop_assert!(b < 1e-10, "D e residual {b:.3e}");
    }

    #[test]
    fn poisson_identity(
        (chain, table) in chain_strategy(10).prop_flat_map(|c| {
            let n = c.n_states();
            (Just(c), table_strategy(n, 3))
        })
    ) {
        let res = poisson_residual(&chain, &table).unwrap();
        prop_assert!(res < 1e-10, "poisson residual {res:.3e}");
    }

    #[test]
    fn alpha_kn_monotone_and_dominated(
        b in 0.801f64..=1.0,
        n in 2u64..200,
    ) {
        let table = ScheduleTable::new(StepSchedule::primary(b).unwrap(), 200).unwrap();
        let mut prev = table.alpha_kn(1, n).unwrap();
        for k in 2..=n {
            let cur = table.alpha_kn(k, n).unwrap();
            prop_assert!(prev <= cur + 1e-15);
            prev = cur;
        }
        prop_assert!((prev - table.alpha(n)).abs() < 1e-15);
    }

    #[test]
    fn squared_weights_bounded_by_next_alpha(
        b in 0.801f64..=1.0,
        n in 1u64..300,
    ) {
        let table = ScheduleTable::new(StepSchedule::primary(b).unwrap(), 300).unwrap();
        let (holds, slack) = table.check_b2_inequality(n).unwrap();
        prop_assert!(holds, "violated at n={n}, b={b}, slack {slack:.3e}");
    }

    #[test]
    fn sigma_monotone(y1 in 1e-6f64..50.0, y2 in 1e-6f64..50.0) {
        let (lo, hi) = if y1 < y2 { (y1, y2) } else { (y2, y1) };
        let s_lo = sigma(lo).unwrap();
        let s_hi = sigma(hi).unwrap();
        prop_assert!(s_hi <= s_lo + 1e-15);
        prop_assert!(s_lo <= 1.0 && s_hi > 0.0);
    }

    #[test]
    fn td_operator_one_lipschitz(
        seed in 0u64..500,
        vs in proptest::collection::vec(-4.0f64..4.0, 8),
    ) {
        let mdp = TabularMdp::random_ergodic(4, 2, seed, 0.1).unwrap();
        let policy = PolicySpec::uniform(4, 2);
        let oracle = EvalOracle::new(&mdp, &policy).unwrap();
        let op = TdOperator::new(&mdp, &policy, &oracle);
        let v = &vs[..4];
        let w = &vs[4..];
        let dvw: Vec<f64> = v.iter().zip(w).map(|(a, b)| a - b).collect();
        let growth = op.growth_constant(op.triples().len(), engine::Norm::Sup);
        for y in 0..op.triples().len() {
            let dh: Vec<f64> = op
                .evaluate(v, y)
                .iter()
                .zip(op.evaluate(w, y))
                .map(|(a, b)| a - b)
                .collect();
            prop_assert!(sup_norm(&dh) <= sup_norm(&dvw) + 1e-12);
            // Linear growth: ||H(x, y)|| <= C_H + ||x||.
            prop_assert!(
                sup_norm(&op.evaluate(v, y)) <= growth + sup_norm(v) + 1e-12
            );
        }
    }

    #[test]
    fn td_compact_form_identity(seed in 0u64..100) {
        let mdp = TabularMdp::random_ergodic(3, 2, seed, 0.15).unwrap();
        let policy = PolicySpec::uniform(3, 2);
        let oracle = EvalOracle::new(&mdp, &policy).unwrap();
        let mut config = TdRunConfig::new(0.9, 300, seed).unwrap();
        config.check_compact_form = true;
        prop_assert!(run_td(&mdp, &policy, &oracle, &config).is_ok());
    }

    #[test]
    fn distance_is_min_over_constant_shifts(
        seed in 0u64..200,
        v in proptest::collection::vec(-5.0f64..5.0, 4),
        c in -10.0f64..10.0,
    ) {
        let mdp = TabularMdp::random_ergodic(4, 1, seed, 0.2).unwrap();
        let policy = PolicySpec::uniform(4, 1);
        let oracle = EvalOracle::new(&mdp, &policy).unwrap();
        let dist = oracle.distance_to_fixed_set(&v);
        // span/2 certificate: no constant shift does better.
        let shifted: Vec<f64> =
            v.iter().zip(oracle.bias()).map(|(vi, bi)| vi - bi - c).collect();
        prop_assert!(dist <= sup_norm(&shifted) + 1e-12);
        // Invariance under shifting v itself.
        let v_shift: Vec<f64> = v.iter().map(|x| x + c).collect();
        prop_assert!((oracle.distance_to_fixed_set(&v_shift) - dist).abs() < 1e-12);
        // The offset's span bounds the distance from below too.
        let offset: Vec<f64> = v.iter().zip(oracle.bias()).map(|(a, b)| a - b).collect();
        prop_assert!((dist - span(&offset) / 2.0).abs() < 1e-14);
    }

    #[test]
    fn gain_of_constant_rewards(seed in 0u64..200, c in -3.0f64..3.0) {
        let n = 3 + (seed % 4) as usize;
        let mdp = TabularMdp::random_ergodic(n, 2, seed, 0.1).unwrap();
        let constant = TabularMdp::new(
            n,
            2,
            vec![c; n * 2],
            (0..n * 2).flat_map(|i| {
                mdp.transition_row(i / 2, i % 2).to_vec()
            }).collect(),
            vec![1.0 / n as f64; n],
        ).unwrap();
        let oracle = EvalOracle::new(&constant, &PolicySpec::uniform(n, 2)).unwrap();
        prop_assert!((oracle.gain() - c).abs() < 1e-12);
        prop_assert!(sup_norm(oracle.bias()) < 1e-10);
    }
}

/// Permutation-composed contractions `H(x, y) = c P_y x + b_y` are
/// 1-Lipschitz in sup norm for `c <= 1`; used to exercise the engine's
/// decomposition on an operator with genuine chain dependence.
struct PermutedContraction {
    c: f64,
    perms: Vec<Vec<usize>>,
    offsets: Vec<Vec<f64>>,
}

impl SkmOperator for PermutedContraction {
    fn dimension(&self) -> usize {
        self.offsets[0].len()
    }
    fn evaluate_into(&self, x: &[f64], y: usize, out: &mut [f64]) {
        for (i, &src) in self.perms[y].iter().enumerate() {
            out[i] = self.c * x[src] + self.offsets[y][i];
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn engine_reconstruction_and_growth(
        seed in 0u64..1000,
        c in 0.3f64..1.0,
        flip in proptest::bool::ANY,
    ) {
        let chain = FiniteChain::from_rows(&[
            vec![0.6, 0.4],
            vec![0.25, 0.75],
        ]).unwrap();
        let perms = if flip {
            vec![vec![1, 0], vec![0, 1]]
        } else {
            vec![vec![0, 1], vec![1, 0]]
        };
        let op = PermutedContraction {
            c,
            perms,
            offsets: vec![vec![0.5, -1.0], vec![-0.3, 0.8]],
        };
        let mut config = SkmRunConfig::new(400, 0.9, seed).unwrap();
        config.decomposition = true;
        // The engine checks the reconstruction identity at 1e-9 every step
        // and aborts on violation, so a clean run is the property.
        let record = engine::run(&op, &chain, &mut ZeroNoise, &config).unwrap();
        prop_assert!(record.growth_margin_min >= 0.0);
        prop_assert!(record.lipschitz_ok);

        // h is nonexpansive on sampled pairs.
        let d_mu = chain.stationary();
        let h0 = op.expected(&[0.4, -0.2], d_mu);
        let h1 = op.expected(&[-1.0, 2.0], d_mu);
        let dh: Vec<f64> = h0.iter().zip(&h1).map(|(a, b)| a - b).collect();
        let dx = [0.4 - (-1.0), -0.2 - 2.0];
        prop_assert!(Norm::Sup.apply(&dh) <= Norm::Sup.apply(&dx) + 1e-12);

        // Linear growth against the operator's own constant.
        let growth = op.growth_constant(2, Norm::Sup);
        for (x, y) in [([3.0, -2.0], 0usize), ([-0.5, 4.0], 1)] {
            let hx = op.evaluate(&x, y);
            prop_assert!(
                Norm::Sup.apply(&hx) <= growth + Norm::Sup.apply(&x) + 1e-12
            );
        }
    }

    #[test]
    fn engine_determinism(seed in 0u64..1000) {
        let chain = FiniteChain::from_rows(&[
            vec![0.5, 0.5],
            vec![0.3, 0.7],
        ]).unwrap();
        let op = PermutedContraction {
            c: 0.9,
            perms: vec![vec![1, 0], vec![0, 1]],
            offsets: vec![vec![1.0, 0.0], vec![0.0, -1.0]],
        };
        let config = SkmRunConfig::new(300, 0.9, seed).unwrap();
        let a = engine::run(&op, &chain, &mut ZeroNoise, &config).unwrap();
        let b = engine::run(&op, &chain, &mut ZeroNoise, &config).unwrap();
        prop_assert_eq!(a.final_x, b.final_x);
        prop_assert_eq!(a.checkpoints, b.checkpoints);
    }
}
