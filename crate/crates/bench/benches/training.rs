use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uprise_core::encoder::{EncoderParams, Vocab};
use uprise_core::training::{loss_gradient, TokenizedInstance};

fn gradient(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let tokens: Vec<String> = (0..2000)
        .map(|i| format!("w{i}"))
        .chain(["<unk>".into(), "<pad>".into()])
        .collect();
    let vocab = Vocab::from_tokens(tokens).unwrap();
    let params = EncoderParams::init(&vocab, 64, 64, 1);
    let mut seq =
        |len: usize| -> Vec<u32> { (0..len).map(|_| rng.random_range(0..2000)).collect() };
    let prompts: Vec<Vec<u32>> = (0..1000).map(|_| seq(24)).collect();
    let batch: Vec<TokenizedInstance> = (0..16)
        .map(|i| TokenizedInstance {
            input_ids: seq(16),
            positive: i,
            negatives: (100..140).map(|j| j + i).collect(),
        })
        .collect();
    c.bench_function("loss_gradient batch=16 negatives=40 d=64", |b| {
        b.iter(|| {
            loss_gradient(black_box(&params), black_box(&batch), black_box(&prompts)).unwrap()
        })
    });
}

criterion_group!(benches, gradient);
criterion_main!(benches);
