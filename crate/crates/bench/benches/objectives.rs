use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use god_bench::{design, mc_objective};
use god_core::{
    multistart, ExpectedUtility, Objective, ObjectiveKind, ObjectiveSpec, OptimizerConfig, Problem, RegressionSpec,
    Utility,
};
use std::hint::black_box;

fn closed_forms(c: &mut Criterion) {
    let reg = RegressionSpec::full_quadratic(3);
    let d = design(16, 3, 1);
    let mut group = c.benchmark_group("closed_form");
    for kind in [ObjectiveKind::ClosedShFixed, ObjectiveKind::ClosedDOptimal] {
        let obj = ExpectedUtility::new(ObjectiveSpec::closed(kind, reg.clone())).unwrap();
        group.bench_function(format!("{kind:?}"), |b| b.iter(|| obj.evaluate(black_box(&d), 0).unwrap()));
    }
    group.finish();
}

fn monte_carlo(c: &mut Criterion) {
    let mut group = c.benchmark_group("monte_carlo_b100");
    group.sample_size(10);
    let cases = [
        ("linear_ss_fixed", Problem::LinearSsFixed, RegressionSpec::full_quadratic(3), 16, 3),
        ("count_ql", Problem::CountQl, RegressionSpec::linear(2), 10, 2),
        ("tte_pl", Problem::TtePl, RegressionSpec::linear(3), 10, 3),
        ("bayes_weibull", Problem::BayesWeibull, RegressionSpec::linear(3), 10, 3),
    ];
    for (name, problem, reg, n, k) in cases {
        let obj = mc_objective(problem, Utility::Nse, reg, 100);
        let d = design(n, k, 2);
        group.bench_with_input(BenchmarkId::from_parameter(name), &d, |b, d| {
            b.iter(|| obj.evaluate(black_box(d), 3).unwrap())
        });
    }
    group.finish();
}

fn exchange(c: &mut Criterion) {
    let obj = ExpectedUtility::new(ObjectiveSpec::closed(
        ObjectiveKind::ClosedDOptimal,
        RegressionSpec::full_quadratic(3),
    ))
    .unwrap();
    let cfg = OptimizerConfig {
        passes: 2,
        restarts: 1,
        ..Default::default()
    };
    let mut group = c.benchmark_group("coordinate_exchange");
    group.sample_size(10);
    group.bench_function("d_optimal_16x3_two_passes", |b| {
        b.iter(|| multistart(&obj, black_box(&cfg), (16, 3)).unwrap())
    });
    group.finish();
}

criterion_group!(benches, closed_forms, monte_carlo, exchange);
criterion_main!(benches);
