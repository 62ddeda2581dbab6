//! Parallel kernels against the sequential fallback on the same inputs.

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use tinykd_core::autodiff::{Tape, Tensor};
use tinykd_core::model::{preset, EncoderModel};
use tinykd_core::parallel;
use tinykd_core::synth::Language;
use tinykd_core::text::{mask_many, Encoded, Lexicon, MaskStrategy};

fn modes() -> [(&'static str, bool); 2] {
    [("parallel", true), ("sequential", false)]
}

fn run<R>(parallel_on: bool, f: impl FnOnce() -> R) -> R {
    if parallel_on {
        f()
    } else {
        parallel::sequential(f)
    }
}

fn matmul(c: &mut Criterion) {
    let n = 192;
    let a = Tensor::new(&[n, n], (0..n * n).map(|i| (i % 17) as f64 * 0.01).collect()).unwrap();
    let b = Tensor::new(&[n, n], (0..n * n).map(|i| (i % 13) as f64 * 0.02).collect()).unwrap();
    let mut group = c.benchmark_group("matmul_192");
    for (name, on) in modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |bench| {
            bench.iter(|| {
                run(on, || {
                    let mut tape = Tape::new();
                    let (x, y) = (tape.constant(a.clone()), tape.constant(b.clone()));
                    black_box(tape.matmul(x, y).unwrap());
                })
            })
        });
    }
    group.finish();
}

fn masking(c: &mut Criterion) {
    let lang = Language::generate(512, 0).unwrap();
    let lexicon = Lexicon::new(lang.words.iter()).unwrap();
    let sentences: Vec<Encoded> = lang.corpus(512, 1).iter().map(|s| Encoded::new(s, &lang.vocab, &lexicon)).collect();
    let indices: Vec<usize> = (0..sentences.len()).collect();
    let mut group = c.benchmark_group("mask_many_512");
    for (name, on) in modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |bench| {
            bench.iter(|| {
                run(on, || black_box(mask_many(&sentences, &indices, &lang.vocab, MaskStrategy::WholeWord, 0.15, 0, 0).unwrap()))
            })
        });
    }
    group.finish();
}

fn forward(c: &mut Criterion) {
    let model = EncoderModel::init(preset("desk-teacher").unwrap(), 0).unwrap();
    let (batch, seq) = (8, 32);
    let ids: Vec<usize> = (0..batch * seq).map(|i| 5 + i % 400).collect();
    let lengths = vec![seq; batch];
    let mut group = c.benchmark_group("forward_desk_teacher");
    group.sample_size(20);
    for (name, on) in modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |bench| {
            bench.iter(|| run(on, || black_box(model.forward(&ids, &lengths, seq).unwrap())))
        });
    }
    group.finish();
}

criterion_group!(benches, matmul, masking, forward);
criterion_main!(benches);
