use std::hint::black_box;

use acopf::powerflow::{solve_fdpf, solve_nr, PfOptions, PfProblem};
use acopf_bench::network;
use criterion::{criterion_group, criterion_main, Criterion};

fn solvers(c: &mut Criterion) {
    for case in ["case30.m", "case118.m"] {
        let net = network(case);
        let problem = PfProblem::from_case(&net).unwrap();
        let options = PfOptions::default();
        // the decoupled factors are cached on the network after this
        solve_fdpf(&problem, None, options).unwrap();

        let mut group = c.benchmark_group(case.trim_end_matches(".m"));
        group.bench_function("nr", |b| b.iter(|| solve_nr(black_box(&problem), None, options).unwrap()));
        group.bench_function("fdpf", |b| b.iter(|| solve_fdpf(black_box(&problem), None, options).unwrap()));
        group.finish();
    }
}

criterion_group!(benches, solvers);
criterion_main!(benches);
