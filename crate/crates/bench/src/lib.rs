//! Fixtures shared by the benchmarks.

use atlasflow_core::flow::{FlowConfig, FlowStack};
use atlasflow_core::geo::NeighborGraph;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A flow with randomly perturbed parameters, so that no layer is the
/// identity.
pub fn random_flow(dim: usize, layers: usize, hidden: Vec<usize>, seed: u64) -> FlowStack {
    let cfg = FlowConfig {
        layers,
        hidden,
        ..FlowConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut f = FlowStack::new(dim, &cfg, &mut rng).expect("valid flow");
    f.params.iter_mut().for_each(|p| *p += rng.gen_range(-0.3..0.3));
    f
}

pub fn uniform_points(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
}

/// Dense all-pairs shortest paths, the baseline for repeated Dijkstra.
pub fn floyd_warshall(g: &NeighborGraph) -> Array2<f64> {
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
            let dik = d[[i, k]];
            if !dik.is_finite() {
                continue;
            }
            for j in 0..n {
                let v = dik + d[[k, j]];
                if v < d[[i, j]] {
                    d[[i, j]] = v;
                }
            }
        }
    }
    d
}
