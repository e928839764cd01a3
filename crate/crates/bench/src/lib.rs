//! Shared fixtures for the criterion benchmarks.

use skmlab_core::markov::FiniteChain;
use skmlab_core::mdp::{EvalOracle, PolicySpec, TabularMdp};
use skmlab_core::td::{AugmentedChain, TdOperator};

pub fn bench_mdp() -> (TabularMdp, PolicySpec, EvalOracle) {
    let mdp = TabularMdp::random_ergodic(8, 3, 7, 0.1).expect("generator parameters are valid");
    let policy = PolicySpec::uniform(8, 3);
    let oracle = EvalOracle::new(&mdp, &policy).expect("generated MDP is ergodic");
    (mdp, policy, oracle)
}

pub fn bench_operator() -> (TdOperator, AugmentedChain) {
    let (mdp, policy, oracle) = bench_mdp();
    let operator = TdOperator::new(&mdp, &policy, &oracle);
    let augmented =
        AugmentedChain::new(&mdp, &policy, &oracle).expect("triple count under the cap");
    (operator, augmented)
}

pub fn bench_chain(n: usize) -> FiniteChain {
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    
                    1.0 + ((i * 31 + j * 17) % 13) as f64
                })
                .collect()
        })
        .map(|row: Vec<f64>| {
            let sum: f64 = row.iter().sum();
            row.into_iter().map(|v| 0.9 * v / sum + 0.1 / n as f64).collect()
        })
        .collect();
    FiniteChain::from_rows(&rows).expect("mixed rows are ergodic")
}
