use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use tedsim_bench::trainer;
use tedsim_core::ExecFlags;

fn train_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("train_step");
    group.sample_size(20);
    for (name, flags) in [
        ("plain", ExecFlags::new(false, false, true)),
        ("dtd", ExecFlags::new(true, false, true)),
        ("dtd+cac", ExecFlags::new(true, true, true)),
    ] {
        let mut t = trainer(8, 2, 2, flags).expect("valid bench config");
        group.bench_function(BenchmarkId::new("g8_t2_e2", name), |b| b.iter(|| t.step().expect("step")));
    }
    group.finish();
}

criterion_group!(benches, train_step);
criterion_main!(benches);
