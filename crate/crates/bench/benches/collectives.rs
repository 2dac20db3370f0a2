use std::thread;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use tedsim_core::{Fabric, GroupKind, Phase, RankId, StorageWidth};

const W: StorageWidth = StorageWidth::Half;

fn run_all(fabric: &Fabric, n: usize, len: usize, all_to_all: bool) {
    let ranks: Vec<RankId> = fabric.ranks().collect();
    let group = fabric.new_group(&ranks, GroupKind::Expert).expect("group");
    thread::scope(|s| {
        for &r in &ranks {
            let group = &group;
            s.spawn(move || {
                let buf = vec![r.0 as f64; len];
                if all_to_all {
                    let send = vec![buf[..len / n].to_vec(); n];
                    fabric.all_to_all_v(group, r, send, W, Phase::Forward).expect("all-to-all");
                } else {
                    fabric.all_reduce(group, r, &buf, W, Phase::Forward).expect("all-reduce");
                }
            });
        }
    });
}

fn collectives(c: &mut Criterion) {
    let mut group = c.benchmark_group("collectives");
    let len = 1 << 14;
    group.throughput(Throughput::Elements(len as u64));
    for n in [2, 4, 8] {
        let fabric = Fabric::new(n).expect("fabric");
        group.bench_with_input(BenchmarkId::new("all_reduce", n), &n, |b, &n| b.iter(|| run_all(&fabric, n, len, false)));
        group.bench_with_input(BenchmarkId::new("all_to_all", n), &n, |b, &n| b.iter(|| run_all(&fabric, n, len, true)));
    }
    group.finish();
}

criterion_group!(benches, collectives);
criterion_main!(benches);
