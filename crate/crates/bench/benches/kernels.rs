use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use qna_bench::Fixture;
use qna_core::oracle::{qna_unfold, sasa_unfold};
use qna_core::qna::{qna_backward, qna_forward};
use qna_core::tensor::{conv2d, Padding};
use qna_core::{AllocationLedger, RngSeed, Tensor};

const INPUT: (usize, usize, usize) = (64, 64, 32);

fn window_sweep(c: &mut Criterion) {
    let mut group = c.benchmark_group("window_sweep_64x64x32");
    group.sample_size(20);
    for k in [3, 7, 11, 15] {
        let f = Fixture::new(INPUT, k, RngSeed(42)).unwrap();
        group.bench_with_input(BenchmarkId::new("qna_efficient", k), &f, |b, f| {
            b.iter(|| qna_forward(&f.x, &f.cfg, &f.params).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("qna_unfold", k), &f, |b, f| {
            b.iter(|| qna_unfold(&f.x, &f.cfg, &f.params, &mut AllocationLedger::new()).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("sasa_unfold", k), &f, |b, f| {
            b.iter(|| sasa_unfold(&f.x, k, &f.sasa, &mut AllocationLedger::new()).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("conv", k), &f, |b, f| {
            b.iter(|| conv2d(&f.x, &f.conv, 1, Padding::Same).unwrap())
        });
    }
    group.finish();
}

fn backward(c: &mut Criterion) {
    let f = Fixture::new((32, 32, 32), 7, RngSeed(42)).unwrap();
    let d_out = Tensor::<f32>::ones([32, 32, 32]).unwrap();
    c.bench_function("qna_backward_32x32x32_k7", |b| b.iter(|| qna_backward(&f.x, &f.cfg, &f.params, &d_out).unwrap()));
}

criterion_group!(benches, window_sweep, backward);
criterion_main!(benches);
