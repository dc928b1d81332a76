use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uprise_core::index::{retrieve_topk, RetrievalIndex};

fn random_index(n: usize, d: usize, rng: &mut ChaCha8Rng) -> RetrievalIndex {
    let rows = (0..n)
        .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    RetrievalIndex::from_rows(rows, (0..n).collect(), "bench".into()).unwrap()
}

fn topk(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("retrieve_topk");
    for n in [1_000, 10_000, 100_000] {
        let index = random_index(n, 64, &mut rng);
        let query: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| retrieve_topk(black_box(&index), black_box(&query), 3).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, topk);
criterion_main!(benches);
