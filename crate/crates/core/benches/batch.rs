use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use tt_core::data::{generate_synthetic, SynthConfig};
use tt_core::harness::{build_vocab, Model, RunConfig};
use tt_core::par;

// Per-sentence forward/backward over one minibatch, on the calling thread
// versus fanned out with `par::map` (sequential too without `parallel`).
fn sequential_vs_parallel(c: &mut Criterion) {
    let corpus = generate_synthetic(&SynthConfig {
        num_sentences: 64,
        ..SynthConfig::default()
    })
    .unwrap();
    let cfg = RunConfig::default();
    let model = Model::new(cfg, build_vocab(&corpus.records)).unwrap();
    let mut group = c.benchmark_group("batch");
    group.sample_size(10);
    for bs in [4, 16, 64] {
        let batch = &corpus.records[..bs];
        group.bench_with_input(BenchmarkId::new("sequential", bs), batch, |bch, batch| {
            bch.iter(|| par::map_seq(batch, |r| model.sentence_grads(r).unwrap().loss))
        });
        group.bench_with_input(BenchmarkId::new("parallel", bs), batch, |bch, batch| {
            bch.iter(|| par::map(batch, |r| model.sentence_grads(r).unwrap().loss))
        });
    }
    group.finish();
}

criterion_group!(benches, sequential_vs_parallel);
criterion_main!(benches);
