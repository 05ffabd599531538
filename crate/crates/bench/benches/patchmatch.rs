use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use promptseg_bench::fixture;
use promptseg_core::{reference_patchmatch, PatchMatchParams};

fn patchmatch(c: &mut Criterion) {
    let params = PatchMatchParams::default();
    let mut group = c.benchmark_group("patchmatch");
    group.sample_size(10);
    for (side, k) in [(64, 1), (64, 3), (128, 2)] {
        let (exemplars, test) = fixture(side, k);
        group.bench_with_input(BenchmarkId::new(format!("k{k}"), side), &side, |bench, _| {
            bench.iter(|| reference_patchmatch(black_box(&exemplars), black_box(&test), &params).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, patchmatch);
criterion_main!(benches);
