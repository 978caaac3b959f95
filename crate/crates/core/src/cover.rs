//! Mapper covers: a one-dimensional PCA lens, overlapping intervals over its
//! range, and single-linkage clusters of every interval preimage. Each
//! cluster is a chart; charts sharing points are joined in the nerve.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::parse_versioned;
use crate::linalg::principal_axes;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Lens {
    #[default]
    Pca1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapperConfig {
    pub n_cubes: usize,
    pub perc_overlap: f64,
    pub linkage_threshold: f64,
    #[serde(default)]
    pub lens: Lens,
}

impl Default for MapperConfig {
    fn default() -> Self {
        MapperConfig {
            n_cubes: 5,
            perc_overlap: 0.45,
            linkage_threshold: 1.0,
            lens: Lens::Pca1,
        }
    }
}

impl MapperConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_cubes == 0 {
            return Err(Error::config("n_cubes must be positive"));
        }
        if !(0.0..1.0).contains(&self.perc_overlap) {
            return Err(Error::config("perc_overlap must lie in [0, 1)"));
        }
        if !(self.linkage_threshold.is_finite() && self.linkage_threshold > 0.0) {
            return Err(Error::config("linkage_threshold must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn contains(&self, x: f64) -> bool {
        x >= self.lo && x <= self.hi
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChartCover {
    pub n_points: usize,
    /// Sorted member indices of every chart.
    pub charts: Vec<Vec<usize>>,
    /// Chart pairs `(i, j)`, `i < j`, sharing at least one point.
    pub nerve_edges: Vec<(usize, usize)>,
    /// Number of charts containing each point.
    pub multiplicity: Vec<usize>,
}

impl ChartCover {
    /// Builds nerve and multiplicities for the given charts and checks that
    /// every point is covered.
    pub fn from_charts(n_points: usize, mut charts: Vec<Vec<usize>>) -> Result<Self> {
        if charts.is_empty() {
            return Err(Error::Cover("cover has no charts".into()));
        }
        let mut multiplicity = vec![0; n_points];
        let mut owners: Vec<Vec<usize>> = vec![Vec::new(); n_points];
        for (k, chart) in charts.iter_mut().enumerate() {
            chart.sort_unstable();
            chart.dedup();
            if chart.is_empty() {
                return Err(Error::Cover(format!("chart {k} is empty")));
            }
            for &i in chart.iter() {
                if i >= n_points {
                    return Err(Error::Cover(format!("chart {k} refers to point {i} of {n_points}")));
                }
                multiplicity[i] += 1;
                owners[i].push(k);
            }
        }
        if let Some(i) = multiplicity.iter().position(|&m| m == 0) {
            return Err(Error::Cover(format!("point {i} is not covered")));
        }
        let mut edges = std::collections::BTreeSet::new();
        for list in &owners {
            for a in 0..list.len() {
                for b in a + 1..list.len() {
                    edges.insert((list[a], list[b]));
                }
            }
        }
        Ok(ChartCover {
            n_points,
            charts,
            nerve_edges: edges.into_iter().collect(),
            multiplicity,
        })
    }

    pub fn len(&self) -> usize {
        self.charts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.charts.is_empty()
    }

    /// Charts containing each point, in increasing order.
    pub fn memberships(&self) -> Vec<Vec<usize>> {
        let mut owners = vec![Vec::new(); self.n_points];
        for (k, chart) in self.charts.iter().enumerate() {
            for &i in chart {
                owners[i].push(k);
            }
        }
        owners
    }

    pub fn neighbours(&self, k: usize) -> Vec<usize> {
        self.nerve_edges
            .iter()
            .filter_map(|&(a, b)| if a == k { Some(b) } else if b == k { Some(a) } else { None })
            .collect()
    }

    pub fn shared_count(&self, a: usize, b: usize) -> usize {
        let (x, y) = (&self.charts[a], &self.charts[b]);
        let (mut i, mut j, mut n) = (0, 0, 0);
        while i < x.len() && j < y.len() {
            match x[i].cmp(&y[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    n += 1;
                    i += 1;
                    j += 1;
                }
            }
        }
        n
    }

    pub fn centroids(&self, points: ArrayView2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((self.len(), points.ncols()));
        for (k, chart) in self.charts.iter().enumerate() {
            let mean = points.select(Axis(0), chart).mean_axis(Axis(0)).expect("charts are nonempty");
            out.row_mut(k).assign(&mean);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    /// Charts containing every point of the cell.
    pub signature: Vec<usize>,
    pub indices: Vec<usize>,
    /// Number of owning charts.
    pub n: usize,
    /// Fraction of all points lying in the cell.
    pub nu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinedPartition {
    pub cells: Vec<Cell>,
}

/// Top principal component scores of the centred points.
pub fn pca_lens(points: ArrayView2<f64>) -> Result<Vec<f64>> {
    if points.nrows() < 2 {
        return Err(Error::DegenerateLens("the lens needs at least two points".into()));
    }
    let (mean, eig) = principal_axes(points)?;
    let scale = points.iter().fold(0.0f64, |a, x| a.max(x.abs())).max(1.0);
    if !(eig.values[0] > 1e-24 * scale * scale) {
        return Err(Error::DegenerateLens("all points coincide".into()));
    }
    let axis = eig.vectors.column(0);
    Ok(points.outer_iter().map(|p| (&p - &mean).dot(&axis)).collect())
}

pub fn build_intervals(lens: &[f64], n_cubes: usize, perc_overlap: f64) -> Result<Vec<Interval>> {
    if n_cubes == 0 {
        return Err(Error::arg("n_cubes must be positive"));
    }
    let lo = lens.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = lens.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(lo < hi) {
        return Err(Error::DegenerateLens(format!("lens range [{lo}, {hi}] is empty")));
    }
    let step = (hi - lo) / n_cubes as f64;
    let pad = step * perc_overlap / 2.0;
    // Shared edges are computed once so that zero overlap leaves no gaps.
    let edge = |j: usize| if j == n_cubes { hi } else { lo + j as f64 * step };
    Ok((0..n_cubes)
        .map(|j| Interval {
            lo: edge(j) - pad,
            hi: edge(j + 1) + pad,
        })
        .collect())
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Connected components of the graph joining points at distance at most
/// `threshold`. Clusters are sorted internally and ordered by first index.
pub fn single_linkage(points: ArrayView2<f64>, threshold: f64) -> Vec<Vec<usize>> {
    let n = points.nrows();
    let rows: Vec<Vec<f64>> = points.outer_iter().map(|r| r.to_vec()).collect();
    let t2 = threshold * threshold;
    let mut parent: Vec<usize> = (0..n).collect();
    for i in 0..n {
        for j in i + 1..n {
            let d2: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            if d2 <= t2 {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        let r = find(&mut parent, i);
        groups.entry(r).or_default().push(i);
    }
    let mut out: Vec<Vec<usize>> = groups.into_values().collect();
    out.sort_by_key(|c| c[0]);
    out
}

fn centroid(points: ArrayView2<f64>, idx: &[usize]) -> Vec<f64> {
    points.select(Axis(0), idx).mean_axis(Axis(0)).expect("nonempty").to_vec()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mapper cover of `points`. Charts with fewer than `n_latent + 2` points
/// are merged into the nerve neighbour with the nearest centroid (nearest
/// chart overall if isolated).
pub fn mapper_cover(points: ArrayView2<f64>, cfg: &MapperConfig, n_latent: usize) -> Result<ChartCover> {
    cfg.validate()?;
    let lens = match cfg.lens {
        Lens::Pca1 => pca_lens(points)?,
    };
    let intervals = build_intervals(&lens, cfg.n_cubes, cfg.perc_overlap)?;
    let mut charts: Vec<Vec<usize>> = Vec::new();
    for iv in &intervals {
        let members: Vec<usize> = (0..lens.len()).filter(|&i| iv.contains(lens[i])).collect();
        if members.is_empty() {
            continue;
        }
        let sub = points.select(Axis(0), &members);
        for cluster in single_linkage(sub.view(), cfg.linkage_threshold) {
            charts.push(cluster.iter().map(|&i| members[i]).collect());
        }
    }
    if charts.is_empty() {
        return Err(Error::Cover("Mapper produced no charts".into()));
    }
    let min_size = n_latent + 2;
    loop {
        let cover = ChartCover::from_charts(points.nrows(), charts.clone())?;
        let Some(small) = (0..cover.len()).find(|&k| cover.charts[k].len() < min_size) else {
            return Ok(cover);
        };
        if cover.len() == 1 {
            return Ok(cover);
        }
        let mut candidates = cover.neighbours(small);
        if candidates.is_empty() {
            candidates = (0..cover.len()).filter(|&k| k != small).collect();
        }
        let c = centroid(points, &cover.charts[small]);
        let mut best = candidates[0];
        let mut best_d = f64::INFINITY;
        for &k in &candidates {
            let d = dist(&c, &centroid(points, &cover.charts[k]));
            if d < best_d || (d == best_d && k < best) {
                best = k;
                best_d = d;
            }
        }
        let moved = std::mem::take(&mut charts[small]);
        charts[best].extend(moved);
        charts.remove(small);
    }
}

/// Groups points by the exact set of charts containing them.
pub fn refine_partition(cover: &ChartCover) -> RefinedPartition {
    let mut groups: BTreeMap<Vec<usize>, Vec<usize>> = BTreeMap::new();
    for (i, sig) in cover.memberships().into_iter().enumerate() {
        groups.entry(sig).or_default().push(i);
    }
    let total = cover.n_points as f64;
    RefinedPartition {
        cells: groups
            .into_iter()
            .map(|(signature, indices)| Cell {
                n: signature.len(),
                nu: indices.len() as f64 / total,
                signature,
                indices,
            })
            .collect(),
    }
}

/// One chart per point: its only chart, or among several the one whose
/// member centroid is nearest (lowest id on ties).
pub fn partition_from_cover(cover: &ChartCover, points: ArrayView2<f64>) -> Vec<usize> {
    let centroids = cover.centroids(points);
    cover
        .memberships()
        .iter()
        .enumerate()
        .map(|(i, owners)| {
            let p = points.row(i).to_vec();
            let mut best = owners[0];
            let mut best_d = f64::INFINITY;
            for &k in owners {
                let d = dist(&p, centroids.row(k).as_slice().expect("standard layout"));
                if d < best_d {
                    best = k;
                    best_d = d;
                }
            }
            best
        })
        .collect()
}

/// Converts hard labels into a cover whose charts are the label classes.
pub fn cover_from_labels(labels: &[usize], n_charts: usize) -> Result<ChartCover> {
    let mut charts = vec![Vec::new(); n_charts];
    for (i, &l) in labels.iter().enumerate() {
        if l >= n_charts {
            return Err(Error::arg(format!("label {l} out of range")));
        }
        charts[l].push(i);
    }
    ChartCover::from_charts(labels.len(), charts)
}

pub const COVER_FORMAT_VERSION: u64 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CoverFile {
    format_version: u64,
    n_points: usize,
    charts: Vec<Vec<usize>>,
    nerve_edges: Vec<(usize, usize)>,
    multiplicity: Vec<usize>,
    cells: Vec<CellRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CellRecord {
    signature: Vec<usize>,
    indices: Vec<usize>,
    nu: f64,
}

pub fn cover_to_json(cover: &ChartCover) -> String {
    let part = refine_partition(cover);
    let file = CoverFile {
        format_version: COVER_FORMAT_VERSION,
        n_points: cover.n_points,
        charts: cover.charts.clone(),
        nerve_edges: cover.nerve_edges.clone(),
        multiplicity: cover.multiplicity.clone(),
        cells: part
            .cells
            .into_iter()
            .map(|c| CellRecord {
                signature: c.signature,
                indices: c.indices,
                nu: c.nu,
            })
            .collect(),
    };
    serde_json::to_string_pretty(&file).expect("cover serialises")
}

/// Parses a cover file and re-derives nerve and multiplicities, rejecting
/// files whose stored values disagree with the charts.
pub fn cover_from_json(text: &str) -> Result<ChartCover> {
    let file: CoverFile = parse_versioned(text, COVER_FORMAT_VERSION)?;
    let cover = ChartCover::from_charts(file.n_points, file.charts)?;
    if cover.nerve_edges != file.nerve_edges || cover.multiplicity != file.multiplicity {
        return Err(Error::Cover("stored nerve or multiplicities do not match the charts".into()));
    }
    Ok(cover)
}
