use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use analogon::datagen::generate_play;
use analogon::envsim::Environment;
use analogon::evalkit::{evaluate_checkpoint, random_tasks, OraclePolicy, SuccessCriterion};
use analogon::oracle::{solve_distances, verify_quasimetric, RewardMode};
use analogon::par::Execution;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn oracle(c: &mut Criterion) {
    let env = Environment::preset("gridscene-5").unwrap();
    let mut group = c.benchmark_group("solve_distances");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| solve_distances(&env, RewardMode::EndogenousMatch, exec))
        });
    }
    group.finish();

    let table = solve_distances(&env, RewardMode::FullMatch, Execution::Parallel);
    let mut group = c.benchmark_group("verify_quasimetric");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| verify_quasimetric(&table, exec)));
    }
    group.finish();
}

fn data_and_eval(c: &mut Criterion) {
    let env = Environment::preset("gridscene-5").unwrap();
    let mut group = c.benchmark_group("generate_play");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| generate_play(&env, 100, 0.2, 0, exec).unwrap())
        });
    }
    group.finish();

    let tasks = random_tasks(&env, 20, 1, SuccessCriterion::Endogenous).unwrap();
    let policy = OraclePolicy::new(&env, &tasks);
    let mut group = c.benchmark_group("evaluate_checkpoint");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| evaluate_checkpoint(&policy, &env, &tasks, 50, 0, 0, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, oracle, data_and_eval);
criterion_main!(benches);
