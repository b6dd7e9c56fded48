use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use taser_bench::{dense_index, fixture, random_matrix, toy_encoder};
use taser_core::dense::dense_topk;
use taser_core::{InputKind, RoutingKind, Tape};

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [32, 128] {
        let (a, b) = (random_matrix(n, n, 1), random_matrix(n, n, 2));
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let mut tape = Tape::new();
                let x = tape.constant(a.clone());
                let y = tape.constant(b.clone());
                black_box(tape.matmul(x, y).expect("square operands"));
            })
        });
    }
    group.finish();
}

fn encode(c: &mut Criterion) {
    let f = fixture(256);
    let mut group = c.benchmark_group("encode");
    for routing in [RoutingKind::Shared, RoutingKind::Det, RoutingKind::Tok] {
        let enc = toy_encoder(f.vocab.len(), routing);
        group.bench_function(routing.name(), |bench| {
            bench.iter(|| {
                black_box(
                    enc.embed(&f.passages[0], InputKind::Passage)
                        .expect("valid ids"),
                )
            })
        });
    }
    group.finish();
}

fn bm25_topk(c: &mut Criterion) {
    let mut group = c.benchmark_group("bm25_topk");
    for n in [256, 4096] {
        let f = fixture(n);
        let q = &f.task.dev[0].question;
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| black_box(f.bm25.search(q, 100)))
        });
    }
    group.finish();
}

fn dense(c: &mut Criterion) {
    let mut group = c.benchmark_group("dense_topk");
    for n in [1024, 16384] {
        let index = dense_index(n, 32, 3);
        let q = random_matrix(1, 32, 4).into_data();
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| black_box(dense_topk(&index, &q, 100).expect("matching dim")))
        });
    }
    group.finish();
}

criterion_group!(benches, matmul, encode, bm25_topk, dense);
criterion_main!(benches);
