use criterion::{criterion_group, criterion_main, Criterion};

use offload_core::sim::{presets, run_scenario};

fn fd50(c: &mut Criterion) {
    let cfg = presets::preset("fd50").unwrap();
    c.bench_function("simulate_fd50", |b| b.iter(|| run_scenario(&cfg).unwrap()));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = fd50
}
criterion_main!(benches);
