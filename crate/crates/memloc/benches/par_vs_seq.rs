//! Parallel vs sequential throughput on the two workloads that dominate a
//! benchmark run: scoring a batch of sequences and single-neuron ablation.
//!
//! With the default `parallel` feature the maps fan out over a rayon pool;
//! built with `--no-default-features` the same entry points run sequentially,
//! so comparing the two builds measures the speedup directly. The sequential
//! baseline is also measured in-process via the always-sequential helper.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use memloc::attrib::{attribute, AttribParams, Method};
use memloc::model::{score_sequence, ModelConfig, TransformerLM};
use memloc::par::{par_map_range, seq_map_range};
use memloc::rng::Rng;

fn bench_model() -> TransformerLM {
    let cfg = ModelConfig {
        layers: 2,
        d_model: 32,
        d_hidden: 64,
        heads: 4,
        vocab: 256,
        context: 48,
    };
    TransformerLM::new_random(cfg, 7).unwrap()
}

fn sequences(n: usize, len: usize) -> Vec<Vec<u16>> {
    (0..n)
        .map(|i| memloc::corpus::random_byte_sequence(1000 + i as u64, len))
        .collect()
}

fn bench_batch_scoring(c: &mut Criterion) {
    let model = bench_model();
    let seqs = sequences(8, 32);
    let mut group = c.benchmark_group("batch_scoring");
    group.sample_size(10);

    group.bench_function(BenchmarkId::new("map", "configured"), |b| {
        b.iter(|| {
            par_map_range(seqs.len(), |i| {
                score_sequence(&model, &seqs[i], 8, None).unwrap().mem_loss
            })
        })
    });
    group.bench_function(BenchmarkId::new("map", "sequential"), |b| {
        b.iter(|| {
            seq_map_range(seqs.len(), |i| {
                score_sequence(&model, &seqs[i], 8, None).unwrap().mem_loss
            })
        })
    });
    group.finish();
}

fn bench_ablation(c: &mut Criterion) {
    let model = bench_model();
    let tokens = memloc::corpus::random_byte_sequence(42, 24);
    let params = AttribParams::default();
    let mut group = c.benchmark_group("zero_out_attribution");
    group.sample_size(10);

    group.bench_function("configured", |b| {
        b.iter(|| {
            attribute(&model, &tokens, 8, Method::ZeroOut, &params, &mut Rng::new(3)).unwrap()
        })
    });
    group.finish();
}

criterion_group!(benches, bench_batch_scoring, bench_ablation);
criterion_main!(benches);
