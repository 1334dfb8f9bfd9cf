#![allow(clippy::needless_range_loop)]

use std::f64::consts::TAU;
use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dpsir_core::circular::{gradient_with, stress_with, Sector};
use dpsir_core::cluster::{cosine_distance_matrix, EmbeddingVector};
use dpsir_core::layout::chart::{force_relax, ChartConfig, RelaxNode};
use dpsir_core::par;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn modes() -> Vec<(&'static str, bool)> {
    let mut m = vec![("sequential", false)];
    if par::available() {
        m.push(("parallel", true));
    }
    m
}

fn instance(n: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let thetas: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..TAU)).collect();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let v = rng.random_range(0.0..2.0);
            d[i][j] = v;
            d[j][i] = v;
        }
    }
    (thetas, d)
}

fn stress(c: &mut Criterion) {
    let mut g = c.benchmark_group("stress");
    for n in [200, 800] {
        let (thetas, d) = instance(n);
        for (name, parallel) in modes() {
            g.bench_with_input(BenchmarkId::new(format!("objective/{name}"), n), &n, |b, _| {
                b.iter(|| stress_with(black_box(&thetas), &d, parallel))
            });
            g.bench_with_input(BenchmarkId::new(format!("gradient/{name}"), n), &n, |b, _| {
                b.iter(|| gradient_with(black_box(&thetas), &d, parallel))
            });
        }
    }
    g.finish();
}

fn distances(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut g = c.benchmark_group("cosine_distance_matrix");
    for n in [200, 600] {
        let vectors: Vec<EmbeddingVector> = (0..n)
            .map(|i| EmbeddingVector {
                snippet_id: format!("s{i:04}"),
                values: (0..256).map(|_| rng.random_range(-1.0..1.0)).collect(),
            })
            .collect();
        for (name, parallel) in modes() {
            g.bench_with_input(BenchmarkId::new(name, n), &n, |b, _| {
                b.iter(|| cosine_distance_matrix(black_box(&vectors), parallel).unwrap())
            });
        }
    }
    g.finish();
}

fn relax(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let sector = Sector { start: 0.0, end: TAU };
    let nodes: Vec<RelaxNode> = (0..300)
        .map(|_| {
            let r = rng.random_range(45.0..285.0);
            RelaxNode {
                theta: rng.random_range(0.0..TAU),
                radius: r,
                radius_target: r,
                size: 5.0,
                sector,
            }
        })
        .collect();
    let mut g = c.benchmark_group("force_relax");
    g.sample_size(10);
    for (name, parallel) in modes() {
        let config = ChartConfig {
            iterations: 100,
            parallel,
            ..ChartConfig::default()
        };
        g.bench_function(BenchmarkId::new(name, nodes.len()), |b| {
            b.iter(|| force_relax(black_box(&nodes), &config))
        });
    }
    g.finish();
}

fn map_range(c: &mut Criterion) {
    let mut g = c.benchmark_group("map_range");
    let n = 100_000;
    for (name, parallel) in modes() {
        g.bench_function(BenchmarkId::new(name, n), |b| {
            b.iter(|| par::map_range(n, parallel, |i| (i as f64).sqrt().sin()))
        });
    }
    g.finish();
}

criterion_group!(benches, stress, distances, relax, map_range);
criterion_main!(benches);
