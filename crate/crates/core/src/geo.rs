//! Isomap: k-nearest-neighbour graphs, graph geodesics and classical MDS.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::top_eigen;

/// Symmetric weighted graph; `adjacency[i]` lists `(neighbour, weight)`
/// sorted by neighbour index.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborGraph {
    pub k: usize,
    pub adjacency: Vec<Vec<(usize, f64)>>,
}

impl NeighborGraph {
    pub fn len(&self) -> usize {
        self.adjacency.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adjacency.is_empty()
    }

    /// Builds an undirected graph from an edge list. Self-loops and
    /// non-positive weights are dropped; parallel edges keep the lightest.
    pub fn from_edges(n: usize, edges: &[(usize, usize, f64)]) -> Result<Self> {
        let mut adjacency = vec![Vec::new(); n];
        for &(a, b, w) in edges {
            if a >= n || b >= n {
                return Err(Error::arg(format!("edge ({a}, {b}) outside a graph of {n} nodes")));
            }
            if !w.is_finite() || w < 0.0 {
                return Err(Error::arg(format!("invalid edge weight {w}")));
            }
            if a == b || w == 0.0 {
                continue;
            }
            adjacency[a].push((b, w));
            adjacency[b].push((a, w));
        }
        for list in &mut adjacency {
            list.sort_by(|x, y| x.0.cmp(&y.0).then(x.1.total_cmp(&y.1)));
            list.dedup_by_key(|e| e.0);
        }
        Ok(NeighborGraph { k: 0, adjacency })
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Each point joined to its `k` nearest neighbours (ties by index), then
/// symmetrised. Duplicate points stay in the graph but their zero-length
/// edges are removed.
pub fn knn_graph(points: ArrayView2<f64>, k: usize) -> Result<NeighborGraph> {
    let n = points.nrows();
    if k == 0 || k >= n {
        return Err(Error::arg(format!("k = {k} must lie in 1..{n}")));
    }
    let rows: Vec<Vec<f64>> = points.outer_iter().map(|r| r.to_vec()).collect();
    let neighbours: Vec<Vec<(usize, f64)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut cand: Vec<(usize, f64)> = (0..n).filter(|&j| j != i).map(|j| (j, sq_dist(&rows[i], &rows[j]))).collect();
            let cmp = |a: &(usize, f64), b: &(usize, f64)| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0));
            cand.select_nth_unstable_by(k - 1, cmp);
            cand.truncate(k);
            cand.into_iter().map(|(j, d2)| (j, d2.sqrt())).collect()
        })
        .collect();
    let edges: Vec<(usize, usize, f64)> = neighbours
        .iter()
        .enumerate()
        .flat_map(|(i, list)| list.iter().map(move |&(j, w)| (i, j, w)))
        .collect();
    let mut g = NeighborGraph::from_edges(n, &edges)?;
    g.k = k;
    Ok(g)
}

#[derive(PartialEq)]
struct Entry(f64, usize);

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then(other.1.cmp(&self.1))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Single-source shortest path lengths (infinite where unreachable).
pub fn dijkstra(g: &NeighborGraph, source: usize) -> Vec<f64> {
    let mut dist = vec![f64::INFINITY; g.len()];
    let mut heap = BinaryHeap::new();
    dist[source] = 0.0;
    heap.push(Entry(0.0, source));
    while let Some(Entry(d, u)) = heap.pop() {
        if d > dist[u] {
            continue;
        }
        for &(v, w) in &g.adjacency[u] {
            let nd = d + w;
            if nd < dist[v] {
                dist[v] = nd;
                heap.push(Entry(nd, v));
            }
        }
    }
    dist
}

/// All-pairs graph geodesics by repeated Dijkstra.
pub fn geodesic_matrix(g: &NeighborGraph) -> Result<Array2<f64>> {
    let n = g.len();
    if n == 0 {
        return Err(Error::arg("geodesics of an empty graph"));
    }
    if let Some(node) = dijkstra(g, 0).iter().position(|d| !d.is_finite()) {
        return Err(Error::Connectivity { node, from: 0 });
    }
    let rows: Vec<Vec<f64>> = (0..n).into_par_iter().map(|s| dijkstra(g, s)).collect();
    let mut d = Array2::zeros((n, n));
    for i in 0..n {
        for j in i + 1..n {
            let v = rows[i][j].min(rows[j][i]);
            d[[i, j]] = v;
            d[[j, i]] = v;
        }
    }
    Ok(d)
}

/// Classical MDS of a distance matrix into `n` dimensions.
pub fn classical_mds(d: ArrayView2<f64>, n: usize) -> Result<Array2<f64>> {
    let m = d.nrows();
    if d.ncols() != m {
        return Err(Error::arg("distance matrix must be square"));
    }
    if n == 0 || n >= m {
        return Err(Error::arg(format!("embedding dimension {n} must lie in 1..{m}")));
    }
    let sq = d.mapv(|x| x * x);
    let row_mean: Vec<f64> = sq.rows().into_iter().map(|r| r.sum() / m as f64).collect();
    let total = row_mean.iter().sum::<f64>() / m as f64;
    let b = Array2::from_shape_fn((m, m), |(i, j)| -0.5 * (sq[[i, j]] - row_mean[i] - row_mean[j] + total));
    let eig = top_eigen(b.view(), n, 1e-10)?;
    let mut out = Array2::zeros((m, n));
    for j in 0..n {
        let lam = eig.values[j];
        if !(lam > 0.0) {
            return Err(Error::Rank(format!("MDS eigenvalue {j} is {lam}")));
        }
        let s = lam.sqrt();
        for i in 0..m {
            out[[i, j]] = eig.vectors[[i, j]] * s;
        }
    }
    Ok(out)
}

/// Isomap embedding and the geodesic matrix it was computed from. When the
/// k-NN graph is disconnected, `k` is doubled (capped at `N - 1`) until it
/// is connected.
pub fn isomap(points: ArrayView2<f64>, k: usize, n: usize) -> Result<(Array2<f64>, Array2<f64>)> {
    let m = points.nrows();
    if m < 2 {
        return Err(Error::arg("Isomap needs at least two points"));
    }
    let mut k = k.clamp(1, m - 1);
    let d = loop {
        let g = knn_graph(points, k)?;
        match geodesic_matrix(&g) {
            Ok(d) => break d,
            Err(Error::Connectivity { .. }) if k < m - 1 => k = (2 * k).min(m - 1),
            Err(e) => return Err(e),
        }
    };
    let emb = classical_mds(d.view(), n)?;
    Ok((emb, d))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn colinear_path() {
        let p = array![[0.0], [1.0], [2.0], [3.0]];
        let g = knn_graph(p.view(), 1).unwrap();
        assert_eq!(g.adjacency[0], vec![(1, 1.0)]);
        assert_eq!(g.adjacency[1], vec![(0, 1.0), (2, 1.0)]);
        let d = geodesic_matrix(&g).unwrap();
        assert_eq!(d[[0, 3]], 3.0);
    }

    #[test]
    fn square_cycle() {
        let p = array![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
        let g = knn_graph(p.view(), 2).unwrap();
        for list in &g.adjacency {
            assert_eq!(list.len(), 2);
            assert!(list.iter().all(|&(_, w)| w == 1.0));
        }
        let d = geodesic_matrix(&g).unwrap();
        assert_eq!(d[[0, 2]], 2.0);
        assert_eq!(d[[1, 3]], 2.0);
    }

    #[test]
    fn duplicates_keep_node() {
        let p = array![[0.0], [0.0], [1.0]];
        let g = knn_graph(p.view(), 1).unwrap();
        assert_eq!(g.len(), 3);
        assert!(g.adjacency.iter().flatten().all(|&(_, w)| w > 0.0));
    }

    #[test]
    fn disconnected_graph_names_node() {
        let g = NeighborGraph::from_edges(3, &[(0, 1, 1.0)]).unwrap();
        assert!(matches!(geodesic_matrix(&g), Err(Error::Connectivity { node: 2, from: 0 })));
    }

    #[test]
    fn mds_three_colinear_points() {
        let d = array![[0.0, 1.0, 2.0], [1.0, 0.0, 1.0], [2.0, 1.0, 0.0]];
        let e = classical_mds(d.view(), 1).unwrap();
        let sign = e[[2, 0]].signum();
        assert_abs_diff_eq!(e[[0, 0]] * sign, -1.0, epsilon = 1e-10);
        assert_abs_diff_eq!(e[[1, 0]], 0.0, epsilon = 1e-10);
        assert_abs_diff_eq!(e[[2, 0]] * sign, 1.0, epsilon = 1e-10);
    }

    #[test]
    fn isomap_bad_dimension() {
        let p = array![[0.0], [1.0], [2.0]];
        assert!(isomap(p.view(), 1, 3).is_err());
    }
}
