use criterion::{criterion_group, criterion_main, BatchSize, Criterion, Throughput};
use std::hint::black_box;

use skmlab_bench::{bench_chain, bench_mdp, bench_operator};
use skmlab_core::engine::{self, SkmRunConfig, ZeroNoise};
use skmlab_core::linalg::Matrix;
use skmlab_core::markov::ChainState;
use skmlab_core::schedules::{ScheduleTable, StepSchedule};
use skmlab_core::td::{run_td, TdRunConfig, TdState};

fn chain_sampling(c: &mut Criterion) {
    let chain = bench_chain(16);
    let mut group = c.benchmark_group("chain");
    group.throughput(Throughput::Elements(10_000));
    group.bench_function("sample_10k_steps", |b| {
        b.iter_batched(
            || ChainState::new(0, 42),
            |mut state| {
                let mut acc = 0usize;
                for _ in 0..10_000 {
                    acc += chain.sample_step(&mut state);
                }
                black_box(acc)
            },
            BatchSize::SmallInput,
        )
    });
    group.finish();
}

fn poisson_solve(c: &mut Criterion) {
    let chain = bench_chain(48);
    let rows: Vec<Vec<f64>> = (0..48)
        .map(|i| (0..4).map(|j| ((i * 7 + j) % 11) as f64 - 5.0).collect())
        .collect();
    let table = Matrix::from_rows(&rows).unwrap();
    c.bench_function("poisson_solve_48_states", |b| {
        b.iter(|| black_box(chain.solve_poisson(black_box(&table)).unwrap()))
    });
}

fn schedule_queries(c: &mut Criterion) {
    let table = ScheduleTable::new(StepSchedule::primary(0.9).unwrap(), 100_000).unwrap();
    c.bench_function("alpha_kn_queries_1k", |b| {
        b.iter(|| {
            let mut acc = 0.0;
            for k in (1..100_000u64).step_by(100) {
                acc += table.alpha_kn(k, 100_000).unwrap();
            }
            black_box(acc)
        })
    });
}

fn td_stepping(c: &mut Criterion) {
    let (mdp, policy, oracle) = bench_mdp();
    let mut group = c.benchmark_group("td");
    group.throughput(Throughput::Elements(1));
    group.bench_function("td_step", |b| {
        let mut state = TdState::new(mdp.n_states());
        let mut t = 0u64;
        b.iter(|| {
            t += 1;
            let alpha = ((t % 1000) as f64 + 2.0).powf(-0.9);
            skmlab_core::td::td_step(&mut state, 0, 0.4, 1, alpha, 1.0 / t as f64).unwrap();
            black_box(state.j)
        })
    });
    group.throughput(Throughput::Elements(100_000));
    group.bench_function("run_td_100k", |b| {
        b.iter(|| {
            let config = TdRunConfig::new(0.9, 100_000, 1).unwrap();
            black_box(run_td(&mdp, &policy, &oracle, &config).unwrap())
        })
    });
    group.finish();
}

fn engine_decomposition(c: &mut Criterion) {
    let (operator, augmented) = bench_operator();
    let mut group = c.benchmark_group("engine");
    group.throughput(Throughput::Elements(20_000));
    group.bench_function("run_plain_20k", |b| {
        b.iter(|| {
            let config = SkmRunConfig::new(20_000, 0.9, 5).unwrap();
            black_box(
                engine::run(&operator, augmented.chain(), &mut ZeroNoise, &config).unwrap(),
            )
        })
    });
    group.bench_function("run_decomposed_20k", |b| {
        b.iter(|| {
            let mut config = SkmRunConfig::new(20_000, 0.9, 5).unwrap();
            config.decomposition = true;
            black_box(
                engine::run(&operator, augmented.chain(), &mut ZeroNoise, &config).unwrap(),
            )
        })
    });
    group.finish();
}

criterion_group!(
    benches,
    chain_sampling,
    poisson_solve,
    schedule_queries,
    td_stepping,
    engine_decomposition
);
criterion_main!(benches);
