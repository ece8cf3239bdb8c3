//! Sequential vs rayon-parallel matmul kernels.
//!
//! Build with `--no-default-features` to see `Parallel` fall back to the
//! sequential path.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use lowbit::kernels::{matmul, matmul_nt, matmul_tn, Exec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(n: usize, seed: u64) -> Vec<f32> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| r.random_range(-1.0f32..1.0)).collect()
}

fn bench_matmul(c: &mut Criterion) {
    // (m, k, n): activation rows x hidden, like a calibration batch through a projection.
    for (m, k, n) in [(128, 64, 64), (512, 128, 256), (1024, 256, 256)] {
        let a = random(m * k, 1);
        let b = random(k * n, 2);
        let bt = random(n * k, 3);
        let at = random(k * m, 4);
        let mut group = c.benchmark_group(format!("matmul_{m}x{k}x{n}"));
        group.throughput(Throughput::Elements((2 * m * k * n) as u64));
        for exec in [Exec::Sequential, Exec::Parallel] {
            let name = format!("{exec:?}");
            group.bench_with_input(BenchmarkId::new("nn", &name), &exec, |bench, &e| {
                bench.iter(|| matmul(e, black_box(&a), black_box(&b), m, k, n))
            });
            group.bench_with_input(BenchmarkId::new("nt", &name), &exec, |bench, &e| {
                bench.iter(|| matmul_nt(e, black_box(&a), black_box(&bt), m, k, n))
            });
            group.bench_with_input(BenchmarkId::new("tn", &name), &exec, |bench, &e| {
                bench.iter(|| matmul_tn(e, black_box(&at), black_box(&b), k, m, n))
            });
        }
        group.finish();
    }
}

criterion_group!(benches, bench_matmul);
criterion_main!(benches);
