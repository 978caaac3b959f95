use std::collections::VecDeque;

use atlasflow_core::cover::{build_intervals, mapper_cover, single_linkage, ChartCover, MapperConfig};
use atlasflow_core::geo::{classical_mds, geodesic_matrix, isomap, knn_graph, NeighborGraph};
use ndarray::{Array2, ArrayView2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn floyd_warshall(g: &NeighborGraph) -> Array2<f64> {
    let n = g.len();
    let mut d = Array2::from_elem((n, n), f64::INFINITY);
    for i in 0..n {
        d[[i, i]] = 0.0;
        for &(j, w) in &g.adjacency[i] {
            d[[i, j]] = d[[i, j]].min(w);
        }
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                let v = d[[i, k]] + d[[k, j]];
                if v < d[[i, j]] {
                    d[[i, j]] = v;
                }
            }
        }
    }
    d
}

fn pairwise(p: ArrayView2<f64>) -> Array2<f64> {
    let n = p.nrows();
    Array2::from_shape_fn((n, n), |(i, j)| {
        p.row(i).iter().zip(p.row(j)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    })
}

#[test]
fn geodesics_equal_floyd_warshall_on_dyadic_graphs() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for n in [2, 17, 120, 200] {
        let mut edges = Vec::new();
        for i in 1..n {
            for _ in 0..3 {
                edges.push((i, rng.gen_range(0..i), rng.gen_range(1..100) as f64 / 16.0));
            }
        }
        let g = NeighborGraph::from_edges(n, &edges).unwrap();
        assert_eq!(geodesic_matrix(&g).unwrap(), floyd_warshall(&g), "n = {n}");
    }
}

#[test]
fn knn_geodesics_match_floyd_warshall() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let pts = Array2::from_shape_fn((200, 3), |_| rng.gen_range(-1.0..1.0));
    let g = knn_graph(pts.view(), 7).unwrap();
    let a = geodesic_matrix(&g).unwrap();
    let b = floyd_warshall(&g);
    assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12));
}

#[test]
fn mds_recovers_planar_distances() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let pts = Array2::from_shape_fn((40, 2), |_| rng.gen_range(-3.0..3.0));
    let d = pairwise(pts.view());
    let emb = classical_mds(d.view(), 2).unwrap();
    let e = pairwise(emb.view());
    assert!(d.iter().zip(&e).all(|(a, b)| (a - b).abs() < 1e-8));
}

#[test]
fn isomap_recovers_spacing_along_a_line() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut t: Vec<f64> = (0..80).map(|_| rng.gen_range(-5.0..5.0)).collect();
    t.sort_by(f64::total_cmp);
    let pts = Array2::from_shape_fn((80, 3), |(i, j)| t[i] * [1.0, 2.0, 2.0][j] / 3.0 + j as f64);
    let (emb, _) = isomap(pts.view(), 4, 1).unwrap();
    let sign = (emb[[79, 0]] - emb[[0, 0]]).signum();
    for i in 1..80 {
        let gap = sign * (emb[[i, 0]] - emb[[i - 1, 0]]);
        assert!((gap - (t[i] - t[i - 1])).abs() < 1e-9, "step {i}: {gap}");
    }
}

fn bfs_components(points: ArrayView2<f64>, threshold: f64) -> Vec<Vec<usize>> {
    let n = points.nrows();
    let d = pairwise(points);
    let mut seen = vec![false; n];
    let mut out = Vec::new();
    for s in 0..n {
        if seen[s] {
            continue;
        }
        let mut comp = vec![];
        let mut q = VecDeque::from([s]);
        seen[s] = true;
        while let Some(u) = q.pop_front() {
            comp.push(u);
            for v in 0..n {
                if !seen[v] && d[[u, v]] <= threshold {
                    seen[v] = true;
                    q.push_back(v);
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn single_linkage_matches_bfs(seed in 0u64..10_000, n in 1usize..60, t in 0.05f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = Array2::from_shape_fn((n, 2), |_| rng.gen_range(-2.0..2.0));
        prop_assert_eq!(single_linkage(pts.view(), t), bfs_components(pts.view(), t));
    }

    #[test]
    fn intervals_cover_the_lens(values in proptest::collection::vec(-50.0f64..50.0, 2..40), cubes in 1usize..8, overlap in 0.0f64..0.9) {
        prop_assume!(values.iter().any(|v| *v != values[0]));
        let iv = build_intervals(&values, cubes, overlap).unwrap();
        prop_assert_eq!(iv.len(), cubes);
        for v in &values {
            prop_assert!(iv.iter().any(|i| i.contains(*v)));
        }
    }

    #[test]
    fn multiplicities_count_memberships(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 30;
        let mut charts: Vec<Vec<usize>> = (0..4).map(|_| (0..n).filter(|_| rng.gen_bool(0.4)).collect()).collect();
        charts.push((0..n).collect());
        let cover = ChartCover::from_charts(n, charts.clone()).unwrap();
        for i in 0..n {
            let m = charts.iter().filter(|c| c.contains(&i)).count();
            prop_assert_eq!(cover.multiplicity[i], m);
        }
    }
}

#[test]
fn mapper_on_a_circle_gives_the_expected_nerve() {
    let n = 400;
    let pts = Array2::from_shape_fn((n, 2), |(i, j)| {
        let t = i as f64 / n as f64 * std::f64::consts::TAU;
        3.0 * if j == 0 { t.cos() } else { (t).sin() * 0.5 }
    });
    let cfg = MapperConfig {
        n_cubes: 3,
        perc_overlap: 0.3,
        linkage_threshold: 0.5,
        ..MapperConfig::default()
    };
    let cover = mapper_cover(pts.view(), &cfg, 1).unwrap();
    // Two end caps and, in the middle interval, the upper and lower arcs.
    assert_eq!(cover.len(), 4);
    assert_eq!(cover.nerve_edges.len(), 4);
    let degrees: Vec<usize> = (0..4).map(|k| cover.neighbours(k).len()).collect();
    assert!(degrees.iter().all(|&d| d == 2), "{degrees:?}");
    let overlap = cover.multiplicity.iter().filter(|&&m| m > 1).count();
    assert!(overlap > 0);
}

