use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fat_core::attention::{
    forward_decomposed, forward_naive_pair, forward_standard, DecomposedAttnParams,
    NaivePairAttnParams, StandardAttnParams, DEFAULT_NAIVE_BUDGET,
};
use fat_core::datagen::{auc, generate_synthetic, SyntheticSpec};
use fat_core::fields::{embed_batch, FieldEmbeddingParams, FieldValue, RawSample, TokenBatch};
use fat_core::model::{embed, grad, FatConfig, FatParams, Variant};

fn rows(fields: usize, vocab: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<RawSample> {
    (0..n)
        .map(|_| (0..fields).map(|_| FieldValue::Id(rng.random_range(0..vocab))).collect())
        .collect()
}

fn benchmark_batch(d: usize, n: usize) -> (fat_core::fields::FieldSchema, TokenBatch) {
    let mut spec = SyntheticSpec::default_benchmark(n, 1);
    spec.schema.embed_dim = d;
    let data = generate_synthetic(&spec).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let emb = FieldEmbeddingParams::init(&data.schema, &mut rng);
    let batch = embed_batch(&data.schema, &data.rows, &emb).unwrap();
    (data.schema, batch)
}

fn attention(c: &mut Criterion) {
    let mut group = c.benchmark_group("attention_forward");
    for d in [16, 32] {
        let (schema, batch) = benchmark_batch(d, 64);
        let f = schema.field_count();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dec = DecomposedAttnParams::init(f, d, 2, &mut rng).unwrap();
        let std = StandardAttnParams::init(d, 2, &mut rng).unwrap();
        let naive = NaivePairAttnParams::from_decomposed(&dec, DEFAULT_NAIVE_BUDGET).unwrap();
        group.bench_with_input(BenchmarkId::new("decomposed", d), &batch, |b, x| {
            b.iter(|| forward_decomposed(x, &dec).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("standard", d), &batch, |b, x| {
            b.iter(|| forward_standard(x, &std).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("naive_pair", d), &batch, |b, x| {
            b.iter(|| forward_naive_pair(x, &naive).unwrap())
        });
    }
    group.finish();
}

fn model_grad(c: &mut Criterion) {
    let mut group = c.benchmark_group("model_grad");
    group.sample_size(20);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let spec = SyntheticSpec::default_benchmark(256, 5);
    let data = generate_synthetic(&spec).unwrap();
    let labels = data.labels_f64();
    for variant in [Variant::Decomposed, Variant::DecomposedHypernet, Variant::Standard] {
        let mut cfg = FatConfig::for_schema(&data.schema);
        cfg.variant = variant;
        let params = FatParams::init(&cfg, &data.schema, &mut rng).unwrap();
        group.bench_function(format!("{variant:?}"), |b| {
            b.iter(|| grad(&params, &data.rows, &labels).unwrap())
        });
    }
    group.finish();
}

fn embedding(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let data = generate_synthetic(&SyntheticSpec::default_benchmark(16, 7)).unwrap();
    let params = FatParams::init(&FatConfig::for_schema(&data.schema), &data.schema, &mut rng).unwrap();
    let raw = rows(data.schema.field_count(), 50, 1024, &mut rng);
    c.bench_function("embed_1024", |b| b.iter(|| embed(&params, &raw).unwrap()));
}

fn auc_exact(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 100_000;
    // coarse scores so tie groups are exercised
    let scores: Vec<f64> = (0..n).map(|_| (rng.random::<f64>() * 1000.0).round()).collect();
    let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
    c.bench_function("auc_100k", |b| b.iter(|| auc(&scores, &labels).unwrap()));
}

criterion_group!(benches, attention, model_grad, embedding, auc_exact);
criterion_main!(benches);
