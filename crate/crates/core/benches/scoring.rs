//! Candidate scoring and ranking, data-parallel against sequential.

use std::hint::black_box;

use cilk_core::decision::Ranking;
use cilk_core::kb::{EntityId, RelationId};
use cilk_core::model::{Direction, EmbeddingModel, ModelConfig};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn model(entities: usize, dim: usize) -> EmbeddingModel {
    let mut m = EmbeddingModel::new(
        ModelConfig {
            dim,
            ..ModelConfig::default()
        },
        1,
    );
    m.grow(entities, 4, &mut ChaCha8Rng::seed_from_u64(1));
    m
}

fn scoring(c: &mut Criterion) {
    let mut group = c.benchmark_group("score_all");
    for &(n, dim) in &[(4_096, 50), (40_000, 250)] {
        let m = model(n, dim);
        let label = format!("{n}x{dim}");
        group.bench_with_input(BenchmarkId::new("parallel", &label), &m, |b, m| {
            b.iter(|| m.score_all(Direction::Tail, black_box(EntityId(7)), RelationId(1)))
        });
        group.bench_with_input(BenchmarkId::new("sequential", &label), &m, |b, m| {
            b.iter(|| m.score_all_seq(Direction::Tail, black_box(EntityId(7)), RelationId(1)))
        });
    }
    group.finish();
}

fn ranking(c: &mut Criterion) {
    let mut group = c.benchmark_group("rank");
    for &n in &[4_096usize, 40_000] {
        let m = model(n, 50);
        group.bench_with_input(BenchmarkId::new("parallel", n), &m, |b, m| {
            b.iter(|| Ranking::from_scores(m.score_all(Direction::Head, black_box(EntityId(3)), RelationId(0))))
        });
        group.bench_with_input(BenchmarkId::new("sequential", n), &m, |b, m| {
            b.iter(|| Ranking::from_scores(m.score_all_seq(Direction::Head, black_box(EntityId(3)), RelationId(0))))
        });
    }
    group.finish();
}

criterion_group!(benches, scoring, ranking);
criterion_main!(benches);
