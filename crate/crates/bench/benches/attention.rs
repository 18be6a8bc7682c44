use catf_bench::{bench_attention, Variant};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn attention_scaling(c: &mut Criterion) {
    let mut group = c.benchmark_group("attention");
    group.sample_size(10);
    for n in [128usize, 256, 512] {
        for variant in [Variant::Full, Variant::LinearShared] {
            group.bench_with_input(BenchmarkId::new(variant.name(), n), &n, |b, &n| {
                b.iter(|| bench_attention(&[variant], &[n], 64, 4, 10, 0).unwrap())
            });
        }
    }
    group.finish();
}

criterion_group!(benches, attention_scaling);
criterion_main!(benches);
