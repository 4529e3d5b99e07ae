use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use branch_landing::bloom::{empirical_fp, random_sids, size_filter, BloomFilter, FilterParams};
use branch_landing::harness::{embedded, evaluate_corpus, CycleModel};
use branch_landing::par::Exec;

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn fp_probes(c: &mut Criterion) {
    let members = random_sids(256, &mut ChaCha8Rng::seed_from_u64(1));
    let s = size_filter(256, 1e-3);
    let f = BloomFilter::encode(&members, FilterParams { m: s.m, k: s.k, seed1: 1, seed2: 2 });
    let mut g = c.benchmark_group("empirical_fp_1e6");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| empirical_fp(black_box(&f), &members, 1_000_000, 7, exec))
        });
    }
    g.finish();
}

fn corpus_eval(c: &mut Criterion) {
    let corpus = embedded();
    let models = CycleModel::standard();
    let mut g = c.benchmark_group("evaluate_corpus");
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| evaluate_corpus(black_box(&corpus), &models, exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, fp_probes, corpus_eval);
criterion_main!(benches);
