use std::collections::BTreeMap;
use std::f64::consts::PI;

use atlasflow_core::atlas::{train_with_report, TrainReport};
use atlasflow_core::cover::{cover_from_labels, mapper_cover, partition_from_cover};
use atlasflow_core::synth::{kde_density_diag, scott_bandwidth, torus_distance, torus_point, trefoil_distance, trefoil_point, ManifoldKind};
use atlasflow_core::{AtlasModel, ChartCover, PointCloud, TrainConfig};
use ndarray::{Array2, ArrayView2};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::CliError;

/// Overlap points paired with the charts adjacent to their label: one
/// `(point, label, chart)` triple for every chart other than `labels[i]`
/// that contains point `i`.
pub fn boundary_pairs(cover: &ChartCover, labels: &[usize]) -> Vec<(usize, usize, usize)> {
    let owners = cover.memberships();
    let mut out = Vec::new();
    for (i, own) in owners.iter().enumerate() {
        for &m in own.iter().filter(|&&m| m != labels[i]) {
            out.push((i, labels[i], m));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryRow {
    pub data_label: usize,
    pub model_label: usize,
    pub points: usize,
    pub partition_error: f64,
    pub cover_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryTable {
    pub rows: Vec<BoundaryRow>,
    pub points: usize,
    pub partition_error: f64,
    pub cover_error: f64,
}

impl BoundaryTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("data_label,model_label,points,partition_error,cover_error\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.data_label + 1,
                r.model_label + 1,
                r.points,
                r.partition_error,
                r.cover_error
            ));
        }
        out.push_str(&format!("all,all,{},{},{}\n", self.points, self.partition_error, self.cover_error));
        out
    }
}

fn squared_error(model: &AtlasModel, k: usize, x: &[f64]) -> Result<f64, CliError> {
    let r = model.reconstruct(k, x)?;
    Ok(r.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// Reconstruction error on the overlap band of the cover, where every point
/// is reconstructed by a chart adjacent to its partition label rather than
/// by the chart it was assigned to.
pub fn boundary_table(data: &PointCloud, cover_model: &AtlasModel, partition_model: &AtlasModel) -> Result<BoundaryTable, CliError> {
    let cover = &cover_model.cover;
    let mismatch = |what: &str| CliError::new(6, format!("checkpoint labels do not match: {what}"));
    if cover.n_points != data.len() || partition_model.cover.n_points != data.len() {
        return Err(mismatch("checkpoints were trained on a different number of points"));
    }
    if cover.len() != partition_model.charts.len() {
        return Err(mismatch("chart counts differ"));
    }
    if cover_model.ambient_dim != data.dim() || partition_model.ambient_dim != data.dim() {
        return Err(mismatch("ambient dimensions differ"));
    }
    let labels = partition_from_cover(cover, data.points.view());
    let part_cover = &partition_model.cover;
    if part_cover.multiplicity.iter().all(|&m| m == 1) {
        let owners = part_cover.memberships();
        if (0..data.len()).any(|i| owners[i][0] != labels[i]) {
            return Err(mismatch("partition checkpoint labels differ from the cover's partition"));
        }
    }

    let mut groups: BTreeMap<(usize, usize), (usize, f64, f64)> = BTreeMap::new();
    for (i, label, m) in boundary_pairs(cover, &labels) {
        let x = data.points.row(i).to_vec();
        let e_cover = squared_error(cover_model, m, &x)?;
        let e_part = squared_error(partition_model, m, &x)?;
        let g = groups.entry((label, m)).or_default();
        g.0 += 1;
        g.1 += e_part;
        g.2 += e_cover;
    }
    let points: usize = groups.values().map(|g| g.0).sum();
    if points == 0 {
        return Err(CliError::other("the cover has no overlap points"));
    }
    let rows = groups
        .iter()
        .map(|(&(a, b), &(n, p, c))| BoundaryRow {
            data_label: a,
            model_label: b,
            points: n,
            partition_error: p / n as f64,
            cover_error: c / n as f64,
        })
        .collect();
    Ok(BoundaryTable {
        rows,
        points,
        partition_error: groups.values().map(|g| g.1).sum::<f64>() / points as f64,
        cover_error: groups.values().map(|g| g.2).sum::<f64>() / points as f64,
    })
}

/// Cover whose charts are the hard partition labels of `cover`.
pub fn partition_cover(cover: &ChartCover, points: ArrayView2<f64>) -> Result<ChartCover, CliError> {
    let labels = partition_from_cover(cover, points);
    Ok(cover_from_labels(&labels, cover.len())?)
}

/// A uniform random subset of at most `max` points, in index order.
pub fn subsample(data: &PointCloud, max: usize, seed: u64) -> PointCloud {
    if data.len() <= max {
        return data.clone();
    }
    let mut idx = sample(&mut ChaCha8Rng::seed_from_u64(seed), data.len(), max).into_vec();
    idx.sort_unstable();
    data.select(&idx)
}

#[derive(Debug, Clone)]
pub struct SingleVsMulti {
    pub single: Vec<f64>,
    pub multi: Vec<f64>,
    pub charts: usize,
    pub single_report: TrainReport,
    pub multi_report: TrainReport,
}

impl SingleVsMulti {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,single,multi\n");
        for (j, (s, m)) in self.single.iter().zip(&self.multi).enumerate() {
            out.push_str(&format!("{},{},{}\n", j + 1, s, m));
        }
        out
    }
}

/// Trains one single-chart model and one Mapper-cover model with the same
/// configuration and returns their per-epoch mean reconstruction losses.
pub fn compare_single(data: &PointCloud, cfg: &TrainConfig) -> Result<SingleVsMulti, CliError> {
    let cover = mapper_cover(data.points.view(), &cfg.mapper, cfg.latent_dim)?;
    let (_, multi_report) = train_with_report(data, &cover, cfg)?;
    let single_cover = ChartCover::from_charts(data.len(), vec![(0..data.len()).collect()])?;
    let (_, single_report) = train_with_report(data, &single_cover, cfg)?;
    Ok(SingleVsMulti {
        single: single_report.recon_curve(),
        multi: multi_report.recon_curve(),
        charts: cover.len(),
        single_report,
        multi_report,
    })
}

/// Points of the noiseless manifold on a regular grid of its generating
/// parameters, `res` steps per parameter.
pub fn manifold_grid(kind: ManifoldKind, res: usize) -> Array2<f64> {
    let step = 2.0 * PI / res as f64;
    match kind {
        ManifoldKind::Trefoil => Array2::from_shape_fn((res, 3), |(i, j)| trefoil_point(i as f64 * step)[j]),
        ManifoldKind::Torus => Array2::from_shape_fn((res * res, 3), |(i, j)| {
            torus_point((i / res) as f64 * step, (i % res) as f64 * step)[j]
        }),
    }
}

pub fn distance_to_manifold(kind: ManifoldKind, p: &[f64]) -> f64 {
    match kind {
        ManifoldKind::Torus => torus_distance(p),
        ManifoldKind::Trefoil => trefoil_distance(p),
    }
}

/// Fraction of rows lying within `tol` of the noiseless manifold.
pub fn fraction_near(kind: ManifoldKind, points: ArrayView2<f64>, tol: f64) -> f64 {
    let near = points
        .rows()
        .into_iter()
        .filter(|r| distance_to_manifold(kind, &r.to_vec()) <= tol)
        .count();
    near as f64 / points.nrows().max(1) as f64
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len()) as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

/// Correlation between the KDEs of two clouds on shared evaluation points,
/// both using the Scott bandwidth of `reference`.
pub fn density_correlation(reference: ArrayView2<f64>, generated: ArrayView2<f64>, grid: ArrayView2<f64>) -> Result<f64, CliError> {
    let h = scott_bandwidth(reference);
    let a = kde_density_diag(reference, grid, &h)?;
    let b = kde_density_diag(generated, grid, &h)?;
    Ok(pearson(&a, &b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn boundary_pairs_cover_every_other_owner() {
        let cover = ChartCover::from_charts(6, vec![vec![0, 1, 2, 3], vec![1, 2, 4], vec![3, 2, 5]]).unwrap();
        let labels = [0, 0, 1, 2, 1, 2];
        let pairs = boundary_pairs(&cover, &labels);
        assert_eq!(pairs, vec![(1, 0, 1), (2, 1, 0), (2, 1, 2), (3, 2, 0)]);
    }

    #[test]
    fn pearson_basics() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]) - 1.0).abs() < 1e-12);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn grids_lie_on_their_manifolds() {
        for kind in [ManifoldKind::Torus, ManifoldKind::Trefoil] {
            let g = manifold_grid(kind, 12);
            assert!(fraction_near(kind, g.view(), 1e-6) == 1.0);
        }
        let far = array![[0.0, 0.0, 0.0]];
        assert_eq!(fraction_near(ManifoldKind::Torus, far.view(), 0.3), 0.0);
    }

    #[test]
    fn subsample_is_sorted_and_deterministic() {
        let data = PointCloud::new(Array2::from_shape_fn((50, 2), |(i, j)| (i * 2 + j) as f64)).unwrap();
        let a = subsample(&data, 10, 3);
        assert_eq!(a, subsample(&data, 10, 3));
        assert_eq!(a.len(), 10);
        assert!(a.points.column(0).windows(2).into_iter().all(|w| w[0] < w[1]));
        assert_eq!(subsample(&data, 100, 3), data);
    }
}
