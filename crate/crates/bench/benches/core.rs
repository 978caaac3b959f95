use atlasflow_bench::{floyd_warshall, random_flow, uniform_points};
use atlasflow_core::flow::{spline_forward, spline_inverse, RqSplineParams, SplineConfig};
use atlasflow_core::geo::{geodesic_matrix, knn_graph};
use atlasflow_core::synth::{kde_density_diag, scott_bandwidth};
use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

fn spline(c: &mut Criterion) {
    let p = RqSplineParams::identity(SplineConfig::default());
    c.bench_function("spline forward", |b| b.iter(|| spline_forward(&p, black_box(0.37)).unwrap()));
    c.bench_function("spline inverse", |b| b.iter(|| spline_inverse(&p, black_box(0.37)).unwrap()));
}

fn flow(c: &mut Criterion) {
    let mut g = c.benchmark_group("flow");
    for layers in [6, 13] {
        let f = random_flow(3, layers, vec![64, 64], 1);
        let x = [0.3, -0.8, 1.1];
        g.bench_with_input(BenchmarkId::new("forward", layers), &f, |b, f| b.iter(|| f.forward(black_box(&x)).unwrap()));
        g.bench_with_input(BenchmarkId::new("inverse", layers), &f, |b, f| b.iter(|| f.inverse(black_box(&x)).unwrap()));
    }
    g.finish();
}

fn geodesics(c: &mut Criterion) {
    let mut g = c.benchmark_group("all-pairs geodesics");
    g.sample_size(10);
    for n in [100, 200, 400] {
        let graph = knn_graph(uniform_points(n, 3, 2).view(), 10).unwrap();
        g.bench_with_input(BenchmarkId::new("dijkstra", n), &graph, |b, gr| b.iter(|| geodesic_matrix(gr).unwrap()));
        g.bench_with_input(BenchmarkId::new("floyd-warshall", n), &graph, |b, gr| b.iter(|| floyd_warshall(gr)));
    }
    g.finish();
}

fn kde(c: &mut Criterion) {
    let reference = uniform_points(10_000, 3, 3);
    let queries = uniform_points(1_000, 3, 4);
    let h = scott_bandwidth(reference.view());
    let mut g = c.benchmark_group("kde");
    g.sample_size(10);
    g.bench_function("10k reference x 1k queries", |b| {
        b.iter(|| kde_density_diag(reference.view(), queries.view(), &h).unwrap())
    });
    g.finish();
}

criterion_group!(benches, spline, flow, geodesics, kde);
criterion_main!(benches);
