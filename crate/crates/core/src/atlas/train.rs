use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{bootstrap_batch, AtlasModel, ChartModel, TrainConfig};
use crate::cover::ChartCover;
use crate::error::{ensure_finite, Error, Result};
use crate::flow::{reconstruct, FlowStack, Normalization};
use crate::geo::isomap;
use crate::linalg::{principal_axes, procrustes};
use crate::losses::{density_objective, expected_points, manifold_objective, Batch, CompatTarget, ExpectedPoints, LossParts, Weights};
use crate::nnopt::{clip_global_norm, AdamState, LrSchedule};
use crate::synth::PointCloud;

/// Epoch averages of every loss term for one chart.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub phase: usize,
    pub epoch: usize,
    pub chart: usize,
    /// Samples seen by the manifold (or, for density phases, density) steps.
    pub samples: usize,
    pub pretrain: Option<f64>,
    pub recon: Option<f64>,
    pub dist: Option<f64>,
    pub compat: Option<f64>,
    /// Weighted manifold objective without the compatibility term.
    pub manifold: Option<f64>,
    pub density: Option<f64>,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub log: Vec<LogRow>,
    /// Mean over overlap points of the largest distance between two
    /// charts' reconstructions, before and after compatibility training.
    pub spread_before: Option<f64>,
    pub spread_after: Option<f64>,
}

impl TrainReport {
    /// Sample-weighted mean reconstruction loss per joint-training epoch
    /// (joint phases first, then compatibility phase), pooled over charts.
    pub fn recon_curve(&self) -> Vec<f64> {
        let mut sums: std::collections::BTreeMap<(usize, usize), (f64, usize)> = Default::default();
        for row in &self.log {
            if let (3 | 4, Some(r)) = (row.phase, row.recon) {
                let e = sums.entry((row.phase, row.epoch)).or_default();
                e.0 += r * row.samples as f64;
                e.1 += row.samples;
            }
        }
        sums.values().map(|(s, n)| s / *n as f64).collect()
    }

    /// Epoch averages of the manifold objective for one chart in one phase.
    pub fn manifold_series(&self, chart: usize, phase: usize) -> Vec<f64> {
        self.log
            .iter()
            .filter(|r| r.chart == chart && r.phase == phase)
            .filter_map(|r| r.manifold)
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from("phase,epoch,chart,samples,pretrain,recon,dist,compat,manifold,density,lr\n");
        for r in &self.log {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                r.phase,
                r.epoch,
                r.chart + 1,
                r.samples,
                opt(r.pretrain),
                opt(r.recon),
                opt(r.dist),
                opt(r.compat),
                opt(r.manifold),
                opt(r.density),
                r.lr
            ));
        }
        out
    }
}

struct Schedule {
    inner: LrSchedule,
    step: usize,
}

impl Schedule {
    fn new(lr: f64, steps: usize) -> Result<Self> {
        Ok(Schedule {
            inner: LrSchedule::new(lr, steps.max(1))?,
            step: 0,
        })
    }

    fn next(&mut self) -> Result<f64> {
        let lr = self.inner.lr_at(self.step)?;
        self.step += 1;
        Ok(lr)
    }
}

#[derive(Default)]
struct Accum {
    samples: usize,
    pretrain: f64,
    recon: f64,
    dist: f64,
    compat: f64,
    compat_samples: usize,
    manifold: f64,
    density: f64,
    density_samples: usize,
    lr: f64,
}

impl Accum {
    fn add(&mut self, p: &LossParts, b: usize, w: &Weights) {
        let bf = b as f64;
        self.samples += b;
        self.pretrain += p.pretrain * bf;
        self.recon += p.recon * bf;
        self.dist += p.dist * bf;
        self.compat += p.compat * p.overlap_count as f64;
        self.compat_samples += p.overlap_count;
        self.manifold += (w.pretrain * p.pretrain + w.recon * p.recon + w.dist * p.dist) * bf;
    }

    fn row(&self, phase: usize, epoch: usize, chart: usize, flags: (bool, bool, bool, bool)) -> LogRow {
        let (pre, rec, dist, comp) = flags;
        let m = |v: f64, on: bool| (on && self.samples > 0).then(|| v / self.samples as f64);
        LogRow {
            phase,
            epoch,
            chart,
            samples: if self.samples > 0 { self.samples } else { self.density_samples },
            pretrain: m(self.pretrain, pre),
            recon: m(self.recon, rec),
            dist: m(self.dist, dist),
            compat: (comp && self.compat_samples > 0).then(|| self.compat / self.compat_samples as f64),
            manifold: m(self.manifold, pre || rec || dist),
            density: (self.density_samples > 0).then(|| self.density / self.density_samples as f64),
            lr: self.lr,
        }
    }
}

struct ChartState {
    id: usize,
    members: Vec<usize>,
    points: Array2<f64>,
    targets: Option<Array2<f64>>,
    geodesics: Option<Array2<f64>>,
    phi: FlowStack,
    gamma: FlowStack,
    adam_phi: AdamState,
    adam_gamma: AdamState,
    rng_batches: ChaCha8Rng,
    rng_density: ChaCha8Rng,
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Splits a shuffled order into batches of `b`; a trailing batch with a
/// single sample is folded into the previous one.
fn batches(order: &[usize], b: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(b).collect();
    if out.len() >= 2 && out.last().is_some_and(|c| c.len() < 2) {
        let keep = out.len() - 2;
        let start = keep * b;
        out.truncate(keep);
        out.push(&order[start..]);
    }
    out
}

fn batch_count(m: usize, b: usize) -> usize {
    let n = m.div_ceil(b);
    if n >= 2 && m % b == 1 {
        n - 1
    } else {
        n
    }
}

fn divergence(phase: usize, epoch: usize, chart: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Numeric { .. } => Error::Divergence {
            phase,
            epoch,
            chart,
            detail: e.to_string(),
        },
        other => other,
    }
}

fn apply_update(params: &mut [f64], grad: &mut [f64], scale: f64, cfg: &TrainConfig, adam: &mut AdamState, lr: f64) -> Result<()> {
    grad.iter_mut().for_each(|g| *g *= scale);
    ensure_finite(grad, "gradient")?;
    clip_global_norm(grad, cfg.clip_norm);
    adam.step(params, grad, lr)
}

impl ChartState {
    fn prepare(id: usize, members: Vec<usize>, cloud: &PointCloud, cfg: &TrainConfig, needs_geometry: bool) -> Result<Self> {
        let n = cfg.latent_dim;
        let points = cloud.points.select(Axis(0), &members);
        let d = points.ncols();
        let (mean, eig) = principal_axes(points.view())?;
        let sigma = eig.values[0].max(0.0).sqrt();
        if !(sigma > 0.0) {
            return Err(Error::Rank(format!("chart {id} has no spread")));
        }
        let rotation: Vec<f64> = eig.vectors.iter().cloned().collect();

        let (targets, geodesics) = if needs_geometry {
            let (emb, geo) = isomap(points.view(), cfg.isomap_k, n)?;
            let centered = &points - &mean;
            let pca = centered.dot(&eig.vectors.slice(ndarray::s![.., ..n]));
            let q = procrustes(emb.view(), pca.view())?;
            (Some(emb.dot(&q)), Some(geo))
        } else {
            (None, None)
        };

        let mut init = rng_for(cfg.seed, 3 * id as u64);
        let mut phi = FlowStack::new(d, &cfg.flow, &mut init)?;
        phi.set_normalization(Normalization {
            center: mean.to_vec(),
            rotation: Some(rotation),
            scale: vec![sigma; d],
            post_scale: vec![sigma; d],
        })?;
        let gamma = FlowStack::new(n, &cfg.flow, &mut init)?;
        Ok(ChartState {
            id,
            adam_phi: AdamState::new(phi.param_count(), cfg.weight_decay),
            adam_gamma: AdamState::new(gamma.param_count(), cfg.weight_decay),
            members,
            points,
            targets,
            geodesics,
            phi,
            gamma,
            rng_batches: rng_for(cfg.seed, 3 * id as u64 + 1),
            rng_density: rng_for(cfg.seed, 3 * id as u64 + 2),
        })
    }

    fn len(&self) -> usize {
        self.members.len()
    }

    fn latents(&self, rows: &[usize], n: usize) -> Result<Array2<f64>> {
        let out: Vec<Result<Vec<f64>>> = rows
            .par_iter()
            .map(|&i| {
                let (z, _) = self.phi.forward(self.points.row(i).as_slice().expect("row-major"))?;
                Ok(z[..n].to_vec())
            })
            .collect();
        let mut flat = Vec::with_capacity(rows.len() * n);
        for r in out {
            flat.extend(r?);
        }
        Ok(Array2::from_shape_vec((rows.len(), n), flat).expect("shape"))
    }

    /// Standardises the current latents feeding `gamma`.
    fn fit_gamma_normalization(&mut self, n: usize) -> Result<()> {
        let all: Vec<usize> = (0..self.len()).collect();
        let lat = self.latents(&all, n)?;
        let mean = lat.mean_axis(Axis(0)).expect("nonempty");
        let std: Vec<f64> = lat
            .std_axis(Axis(0), 0.0)
            .iter()
            .map(|s| if s.is_finite() && *s > 1e-12 { *s } else { 1.0 })
            .collect();
        self.gamma.set_normalization(Normalization {
            center: mean.to_vec(),
            rotation: None,
            scale: std,
            post_scale: vec![1.0; n],
        })
    }

    fn make_batch(&self, rows: &[usize], with_targets: bool, with_distances: bool) -> Result<Batch> {
        let mut batch = Batch::new(self.points.select(Axis(0), rows))
            .with_indices(rows.to_vec(), rows.iter().map(|&i| self.members[i]).collect())?;
        if with_targets {
            let t = self.targets.as_ref().ok_or_else(|| Error::arg("pretraining targets were not computed"))?;
            batch = batch.with_references(t.select(Axis(0), rows))?;
        }
        if with_distances {
            let g = self.geodesics.as_ref().ok_or_else(|| Error::arg("geodesics were not computed"))?;
            let b = rows.len();
            batch = batch.with_distances(Array2::from_shape_fn((b, b), |(i, j)| g[[rows[i], rows[j]]]))?;
        }
        Ok(batch)
    }

    fn density_step(&mut self, cfg: &TrainConfig, multiplicity: &[usize], sched: &mut Schedule, acc: &mut Accum) -> Result<()> {
        let n = cfg.latent_dim;
        let rows = bootstrap_batch(&self.members, multiplicity, cfg.batch_size, &mut self.rng_density)?;
        let lat = self.latents(&rows, n)?;
        let (loss, mut grad) = density_objective(&self.gamma, lat.view(), true)?;
        let lr = sched.next()?;
        apply_update(&mut self.gamma.params, &mut grad, cfg.lambda_d, cfg, &mut self.adam_gamma, lr)?;
        acc.density += loss * rows.len() as f64;
        acc.density_samples += rows.len();
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn manifold_epoch(
        &mut self,
        cfg: &TrainConfig,
        weights: Weights,
        compat: Option<CompatTarget<'_>>,
        track_recon: bool,
        multiplicity: &[usize],
        sched: &mut Schedule,
        density_sched: Option<&mut Schedule>,
        acc: &mut Accum,
    ) -> Result<()> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut self.rng_batches);
        let mut density_sched = density_sched;
        for rows in batches(&order, cfg.batch_size) {
            let batch = self.make_batch(rows, weights.pretrain != 0.0, weights.dist != 0.0)?;
            let (parts, mut grad) = manifold_objective(&self.phi, cfg.latent_dim, &batch, &weights, compat, track_recon, true)?;
            let lr = sched.next()?;
            apply_update(&mut self.phi.params, &mut grad, cfg.lambda_m, cfg, &mut self.adam_phi, lr)?;
            acc.add(&parts, rows.len(), &weights);
            acc.lr = lr;
            if let Some(ds) = density_sched.as_deref_mut() {
                self.density_step(cfg, multiplicity, ds, acc)?;
            }
        }
        Ok(())
    }

    fn density_epoch(&mut self, cfg: &TrainConfig, multiplicity: &[usize], sched: &mut Schedule, acc: &mut Accum) -> Result<()> {
        for _ in 0..batch_count(self.len(), cfg.batch_size) {
            acc.lr = sched.inner.lr_at(sched.step)?;
            self.density_step(cfg, multiplicity, sched, acc)?;
        }
        Ok(())
    }
}

/// Mean over points lying in two or more charts of the largest distance
/// between two of their per-chart reconstructions.
pub(crate) fn reconstruction_spread(phis: &[&FlowStack], n: usize, cover: &ChartCover, points: ArrayView2<f64>) -> Result<f64> {
    let owners = cover.memberships();
    let overlap: Vec<usize> = (0..cover.n_points).filter(|&i| owners[i].len() >= 2).collect();
    if overlap.is_empty() {
        return Ok(0.0);
    }
    let spreads: Vec<Result<f64>> = overlap
        .par_iter()
        .map(|&i| {
            let x = points.row(i).to_vec();
            let recs: Vec<Vec<f64>> = owners[i].iter().map(|&k| reconstruct(phis[k], n, &x)).collect::<Result<_>>()?;
            let mut worst: f64 = 0.0;
            for a in 0..recs.len() {
                for b in a + 1..recs.len() {
                    let d = recs[a].iter().zip(&recs[b]).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
                    worst = worst.max(d);
                }
            }
            Ok(worst)
        })
        .collect();
    let mut total = 0.0;
    for s in spreads {
        total += s?;
    }
    Ok(total / overlap.len() as f64)
}

/// Fits an atlas to `points` over `cover`.
pub fn train(points: &PointCloud, cover: &ChartCover, cfg: &TrainConfig) -> Result<AtlasModel> {
    train_with_report(points, cover, cfg).map(|(m, _)| m)
}

pub fn train_with_report(points: &PointCloud, cover: &ChartCover, cfg: &TrainConfig) -> Result<(AtlasModel, TrainReport)> {
    cfg.validate()?;
    let n = cfg.latent_dim;
    if cover.n_points != points.len() {
        return Err(Error::arg(format!("cover over {} points, data has {}", cover.n_points, points.len())));
    }
    if n > points.dim() {
        return Err(Error::config(format!("latent_dim {n} exceeds ambient dimension {}", points.dim())));
    }
    let e = cfg.epochs;
    let needs_geometry = e.e1 > 0 || e.e2 > 0 || (cfg.lambda_p > 0.0 && e.e3 + e.e4 > 0);
    let mult = &cover.multiplicity;
    let mut report = TrainReport::default();

    let mut states: Vec<ChartState> = cover
        .charts
        .iter()
        .enumerate()
        .map(|(k, members)| ChartState::prepare(k, members.clone(), points, cfg, needs_geometry))
        .collect::<Result<_>>()?;

    let all = (true, true, true, true);
    for st in &mut states {
        let k = st.id;
        let per_epoch = batch_count(st.len(), cfg.batch_size);

        if e.e1 > 0 {
            let mut sched = Schedule::new(cfg.lr, e.e1 * per_epoch)?;
            let w = Weights {
                pretrain: 1.0,
                ..Weights::default()
            };
            for j in 1..=e.e1 {
                let mut acc = Accum::default();
                st.manifold_epoch(cfg, w, None, false, mult, &mut sched, None, &mut acc)
                    .map_err(divergence(1, j, k))?;
                report.log.push(acc.row(1, j, k, (true, false, false, false)));
            }
        }

        st.fit_gamma_normalization(n).map_err(divergence(2, 0, k))?;
        if e.e1 > 0 {
            let mut sched = Schedule::new(cfg.lr, e.e1 * per_epoch)?;
            for j in 1..=e.e1 {
                let mut acc = Accum::default();
                st.density_epoch(cfg, mult, &mut sched, &mut acc).map_err(divergence(2, j, k))?;
                report.log.push(acc.row(2, j, k, all));
            }
        }

        let joint = e.e2 + e.e3;
        if joint > 0 {
            let mut sched = Schedule::new(cfg.lr, joint * per_epoch)?;
            let mut dsched = Schedule::new(cfg.lr, joint * per_epoch)?;
            for j in 1..=joint {
                let lambda = if j <= e.e2 && e.e2 > 1 {
                    1.0 + (cfg.lambda_p - 1.0) * (j - 1) as f64 / (e.e2 - 1) as f64
                } else if j <= e.e2 {
                    1.0
                } else {
                    cfg.lambda_p
                };
                let mut acc = Accum::default();
                st.manifold_epoch(cfg, Weights::manifold(lambda), None, true, mult, &mut sched, Some(&mut dsched), &mut acc)
                    .map_err(divergence(3, j, k))?;
                report.log.push(acc.row(3, j, k, (false, true, true, false)));
            }
        }
    }

    if e.e4 > 0 {
        let view = points.points.view();
        let spread = |states: &[ChartState]| {
            let phis: Vec<&FlowStack> = states.iter().map(|s| &s.phi).collect();
            reconstruction_spread(&phis, n, cover, view)
        };
        report.spread_before = Some(spread(&states).map_err(divergence(4, 0, 0))?);
        let mut scheds: Vec<(Schedule, Schedule)> = states
            .iter()
            .map(|st| {
                let steps = e.e4 * batch_count(st.len(), cfg.batch_size);
                Ok((Schedule::new(cfg.lr, steps)?, Schedule::new(cfg.lr, steps)?))
            })
            .collect::<Result<_>>()?;
        let mut expected: Option<ExpectedPoints> = None;
        for j in 1..=e.e4 {
            if (j - 1) % cfg.refresh_every == 0 {
                let phis: Vec<&FlowStack> = states.iter().map(|s| &s.phi).collect();
                expected = Some(expected_points(&phis, n, cover, view, j).map_err(divergence(4, j, 0))?);
            }
            let snapshot = expected.as_ref().expect("computed on the first epoch");
            let weights = Weights {
                compat: j as f64 / e.e4 as f64 * cfg.lambda_o,
                ..Weights::manifold(cfg.lambda_p)
            };
            for (st, (sched, dsched)) in states.iter_mut().zip(scheds.iter_mut()) {
                let target = CompatTarget {
                    expected: snapshot,
                    multiplicity: mult,
                    epoch: j,
                    every: cfg.refresh_every,
                };
                let mut acc = Accum::default();
                st.manifold_epoch(cfg, weights, Some(target), true, mult, sched, Some(dsched), &mut acc)
                    .map_err(divergence(4, j, st.id))?;
                report.log.push(acc.row(4, j, st.id, (false, true, true, true)));
            }
        }
        report.spread_after = Some(spread(&states).map_err(divergence(4, e.e4, 0))?);
    }

    if e.e5 > 0 {
        for st in &mut states {
            let mut sched = Schedule::new(cfg.lr, e.e5 * batch_count(st.len(), cfg.batch_size))?;
            for j in 1..=e.e5 {
                let mut acc = Accum::default();
                st.density_epoch(cfg, mult, &mut sched, &mut acc).map_err(divergence(5, j, st.id))?;
                report.log.push(acc.row(5, j, st.id, all));
            }
        }
    }

    let charts = states
        .into_iter()
        .map(|st| ChartModel {
            id: st.id,
            members: st.members,
            phi: st.phi,
            gamma: st.gamma,
            weight: 0.0,
        })
        .collect();
    let model = AtlasModel::new(cover.clone(), charts, cfg.clone())?;
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batching_folds_singletons() {
        let order: Vec<usize> = (0..9).collect();
        let b = batches(&order, 4);
        assert_eq!(b.iter().map(|c| c.len()).collect::<Vec<_>>(), vec![4, 5]);
        assert_eq!(batch_count(9, 4), 2);
        let order: Vec<usize> = (0..10).collect();
        assert_eq!(batches(&order, 4).len(), 3);
        assert_eq!(batch_count(10, 4), 3);
        let order: Vec<usize> = (0..3).collect();
        assert_eq!(batches(&order, 8).len(), 1);
        assert_eq!(batch_count(3, 8), 1);
    }
}
