use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};

use mcmamba_bench::scan_fixture;
use mcmamba_core::ssm::{scan_pairs_parallel, scan_pairs_sequential, scan_sequential, SsmState};
use mcmamba_core::stft::{istft, stft, StftConfig};
use mcmamba_core::tensor::Tensor;

fn bench_scan_kernels(c: &mut Criterion) {
    let mut group = c.benchmark_group("selective_scan");
    for &len in &[256usize, 4096] {
        let fx = scan_fixture(42, len, 64, 16);
        group.throughput(Throughput::Elements(len as u64));
        group.bench_with_input(BenchmarkId::new("sequential", len), &fx, |b, fx| {
            b.iter(|| {
                let mut st = SsmState::new(&fx.params);
                scan_sequential(&fx.params, &fx.x, &mut st).unwrap()
            })
        });
        group.bench_with_input(BenchmarkId::new("pairs_seq", len), &fx, |b, fx| {
            b.iter(|| {
                scan_pairs_sequential(&fx.abar, &fx.bx, &fx.c, fx.len, fx.d_inner, fx.d_state)
            })
        });
        group.bench_with_input(BenchmarkId::new("pairs_par", len), &fx, |b, fx| {
            b.iter(|| {
                scan_pairs_parallel(&fx.abar, &fx.bx, &fx.c, fx.len, fx.d_inner, fx.d_state)
            })
        });
    }
    group.finish();
}

fn bench_stft(c: &mut Criterion) {
    let cfg = StftConfig::default();
    let audio = Tensor::from_fn(&[1, 16_000], |i| ((i % 31) as f64 / 31.0) - 0.5);
    let spec = stft(&audio, &cfg, 16_000).unwrap();
    let mut group = c.benchmark_group("stft");
    group.throughput(Throughput::Elements(16_000));
    group.bench_function("forward_1s", |b| {
        b.iter(|| stft(&audio, &cfg, 16_000).unwrap())
    });
    group.bench_function("inverse_1s", |b| b.iter(|| istft(&spec, &cfg).unwrap()));
    group.finish();
}

criterion_group!(benches, bench_scan_kernels, bench_stft);
criterion_main!(benches);
