use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use stabcon_core::sim::campaign::{consensus_config, convergence_config, to_config};
use stabcon_core::sim::scenario::{run_mv, run_to_urb};
use stabcon_core::Variant;

fn mv(c: &mut Criterion) {
    let mut g = c.benchmark_group("mv_run");
    for n in [3usize, 5, 7] {
        for (name, v) in [("seq", Variant::Sequential), ("conc", Variant::Concurrent)] {
            let cfg = consensus_config(n, 1, v);
            g.bench_with_input(BenchmarkId::new(name, n), &cfg, |b, cfg| b.iter(|| run_mv(black_box(cfg), false).unwrap()));
        }
    }
    g.finish();
}

fn convergence(c: &mut Criterion) {
    let cfg = convergence_config(4, 2, Variant::Sequential);
    c.bench_function("mv_converge_n4", |b| b.iter(|| run_mv(black_box(&cfg), false).unwrap()));
}

fn total_order(c: &mut Criterion) {
    let mut g = c.benchmark_group("to_urb_run");
    g.sample_size(10);
    for n in [3usize, 5] {
        let cfg = to_config(n, 0, true);
        g.bench_with_input(BenchmarkId::from_parameter(n), &cfg, |b, cfg| b.iter(|| run_to_urb(black_box(cfg), false).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, mv, convergence, total_order);
criterion_main!(benches);
