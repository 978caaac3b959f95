//! Training objectives for the coordinate flows `phi` and density flows
//! `gamma`, with exact parameter gradients.
//!
//! All manifold-side terms share one batched evaluation: a taped forward
//! pass `z = phi(x)`, an optional taped inverse pass of the projection
//! `phi^-1(Proj z)`, per-sample cotangents, and a reverse sweep. Samples are
//! processed in fixed-size chunks whose gradients are summed in order, so
//! results do not depend on the thread count.

use std::f64::consts::PI;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;

use crate::cover::ChartCover;
use crate::error::{Error, Result};
use crate::flow::{project, reconstruct, FlowStack, Tape};

const CHUNK: usize = 16;

/// A minibatch drawn from one chart.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// Positions within the chart's member list.
    pub members: Vec<usize>,
    /// Indices into the full point cloud.
    pub global: Vec<usize>,
    pub points: Array2<f64>,
    /// Pretraining targets, one row per sample.
    pub references: Option<Array2<f64>>,
    /// Reference geodesic distances between the samples.
    pub distances: Option<Array2<f64>>,
}

impl Batch {
    pub fn new(points: Array2<f64>) -> Self {
        let b = points.nrows();
        Batch {
            members: (0..b).collect(),
            global: (0..b).collect(),
            points,
            references: None,
            distances: None,
        }
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn with_indices(mut self, members: Vec<usize>, global: Vec<usize>) -> Result<Self> {
        if members.len() != self.len() || global.len() != self.len() {
            return Err(Error::arg("batch index lists must match the batch size"));
        }
        self.members = members;
        self.global = global;
        Ok(self)
    }

    pub fn with_references(mut self, references: Array2<f64>) -> Result<Self> {
        if references.nrows() != self.len() {
            return Err(Error::arg("one reference row per sample is required"));
        }
        self.references = Some(references);
        Ok(self)
    }

    pub fn with_distances(mut self, distances: Array2<f64>) -> Result<Self> {
        let b = self.len();
        if distances.dim() != (b, b) {
            return Err(Error::arg("reference distances must be b x b"));
        }
        for i in 0..b {
            if distances[[i, i]] != 0.0 {
                return Err(Error::arg("reference distances need a zero diagonal"));
            }
            for j in 0..i {
                if distances[[i, j]] != distances[[j, i]] {
                    return Err(Error::arg("reference distances must be symmetric"));
                }
            }
        }
        self.distances = Some(distances);
        Ok(self)
    }
}

/// Reconstructions `x_hat` averaged over the charts containing each point.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpectedPoints {
    pub points: Array2<f64>,
    /// Epoch at which the snapshot was taken.
    pub epoch: usize,
}

impl ExpectedPoints {
    /// Fails unless the snapshot was taken within the last `every` epochs.
    pub fn check_fresh(&self, now: usize, every: usize) -> Result<()> {
        if now < self.epoch || now - self.epoch >= every {
            return Err(Error::Staleness {
                computed: self.epoch,
                now,
                every,
            });
        }
        Ok(())
    }
}

/// Compatibility targets for one chart's batch.
#[derive(Debug, Clone, Copy)]
pub struct CompatTarget<'a> {
    pub expected: &'a ExpectedPoints,
    pub multiplicity: &'a [usize],
    pub epoch: usize,
    pub every: usize,
}

/// Weights of the manifold-side terms.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Weights {
    pub pretrain: f64,
    pub recon: f64,
    pub dist: f64,
    pub compat: f64,
}

impl Weights {
    /// `lambda * L_dist + (1 - lambda) * L_recon`.
    pub fn manifold(lambda: f64) -> Self {
        Weights {
            recon: 1.0 - lambda,
            dist: lambda,
            ..Weights::default()
        }
    }
}

/// Unweighted term values and the weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub pretrain: f64,
    pub recon: f64,
    pub dist: f64,
    pub compat: f64,
    pub total: f64,
    /// Samples with multiplicity at least two.
    pub overlap_count: usize,
}

struct Pass {
    z: Vec<f64>,
    tape: Tape,
    recon: Option<(Vec<f64>, Tape)>,
}

fn run_chunks<T: Send, F>(b: usize, f: F) -> Result<Vec<T>>
where
    F: Fn(usize) -> Result<T> + Sync,
{
    let chunks: Vec<Result<Vec<T>>> = (0..b.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| (c * CHUNK..((c + 1) * CHUNK).min(b)).map(&f).collect())
        .collect();
    let mut out = Vec::with_capacity(b);
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

fn sum_chunk_grads<F>(b: usize, len: usize, f: F) -> Result<Vec<f64>>
where
    F: Fn(usize, &mut [f64]) -> Result<()> + Sync,
{
    let chunks: Vec<Result<Vec<f64>>> = (0..b.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut g = vec![0.0; len];
            for i in c * CHUNK..((c + 1) * CHUNK).min(b) {
                f(i, &mut g)?;
            }
            Ok(g)
        })
        .collect();
    let mut total = vec![0.0; len];
    for c in chunks {
        for (t, g) in total.iter_mut().zip(c?) {
            *t += g;
        }
    }
    Ok(total)
}

fn sq_norm_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Evaluates the weighted manifold objective on a batch and, when
/// `with_grad` is set, its gradient with respect to `phi`'s parameters.
///
/// The reconstruction term is evaluated whenever the inverse pass runs
/// (non-zero reconstruction or compatibility weight, or `track_recon`), so
/// that it can be logged even when it carries no weight.
pub fn manifold_objective(
    phi: &FlowStack,
    n: usize,
    batch: &Batch,
    weights: &Weights,
    compat: Option<CompatTarget<'_>>,
    track_recon: bool,
    with_grad: bool,
) -> Result<(LossParts, Vec<f64>)> {
    let b = batch.len();
    let d = phi.dim;
    if batch.points.ncols() != d {
        return Err(Error::arg("batch dimension does not match the flow"));
    }
    if n == 0 || n > d {
        return Err(Error::arg(format!("latent dimension {n} out of range")));
    }
    if b == 0 {
        return Err(Error::arg("empty batch"));
    }
    if weights.pretrain != 0.0 {
        match &batch.references {
            Some(r) if r.ncols() == n => {}
            Some(_) => return Err(Error::arg("reference rows must have the latent dimension")),
            None => return Err(Error::arg("pretraining needs reference rows")),
        }
    }
    if weights.dist != 0.0 {
        if b < 2 {
            return Err(Error::arg("the pairwise distance loss needs at least two samples"));
        }
        if batch.distances.is_none() {
            return Err(Error::arg("the pairwise distance loss needs reference distances"));
        }
    }
    if weights.compat != 0.0 {
        match compat {
            Some(c) => c.expected.check_fresh(c.epoch, c.every)?,
            None => return Err(Error::arg("the compatibility loss needs expected points")),
        }
    }
    let need_inverse = weights.recon != 0.0 || weights.compat != 0.0 || track_recon;

    let passes: Vec<Pass> = run_chunks(b, |i| {
        let x = batch.points.row(i).to_vec();
        let (z, _, tape) = phi.forward_taped(&x)?;
        let recon = if need_inverse {
            let (xr, _, t) = phi.inverse_taped(&project(&z, n)?)?;
            Some((xr, t))
        } else {
            None
        };
        Ok(Pass { z, tape, recon })
    })?;

    let mut parts = LossParts::default();
    let mut z_bar = vec![vec![0.0; d]; b];
    let mut x_bar = vec![vec![0.0; d]; b];
    let bf = b as f64;

    if let (true, Some(r)) = (weights.pretrain != 0.0, &batch.references) {
        for (i, p) in passes.iter().enumerate() {
            let r = r.row(i);
            for j in 0..n {
                let diff = p.z[j] - r[j];
                parts.pretrain += diff * diff / bf;
                z_bar[i][j] += weights.pretrain * 2.0 * diff / bf;
            }
        }
    }

    if need_inverse {
        for (i, p) in passes.iter().enumerate() {
            let (xr, _) = p.recon.as_ref().expect("inverse pass ran");
            let x = batch.points.row(i);
            for j in 0..d {
                let diff = xr[j] - x[j];
                parts.recon += diff * diff / bf;
                x_bar[i][j] += weights.recon * 2.0 * diff / bf;
            }
        }
    }

    if let (true, Some(dm)) = (weights.dist != 0.0, &batch.distances) {
        let scale = 1.0 / (bf * (bf - 1.0));
        for i in 0..b {
            for j in (i + 1)..b {
                let vi = &passes[i].z[..n];
                let vj = &passes[j].z[..n];
                let r = sq_norm_diff(vi, vj).sqrt();
                let gap = dm[[i, j]] - r;
                parts.dist += 2.0 * scale * gap * gap;
                if r > 1e-12 {
                    let coef = -4.0 * scale * weights.dist * gap / r;
                    for k in 0..n {
                        let g = coef * (vi[k] - vj[k]);
                        z_bar[i][k] += g;
                        z_bar[j][k] -= g;
                    }
                }
            }
        }
    }

    if let Some(c) = compat {
        let overlap: Vec<usize> = (0..b).filter(|&i| c.multiplicity[batch.global[i]] >= 2).collect();
        parts.overlap_count = overlap.len();
        if !overlap.is_empty() && need_inverse {
            let m = overlap.len() as f64;
            for &i in &overlap {
                let (xr, _) = passes[i].recon.as_ref().expect("inverse pass ran");
                let target = c.expected.points.row(batch.global[i]);
                for j in 0..d {
                    let diff = xr[j] - target[j];
                    parts.compat += diff * diff / m;
                    x_bar[i][j] += weights.compat * 2.0 * diff / m;
                }
            }
        }
    }

    parts.total = weights.pretrain * parts.pretrain
        + weights.recon * parts.recon
        + weights.dist * parts.dist
        + weights.compat * parts.compat;
    if !parts.total.is_finite() {
        return Err(Error::Numeric {
            index: 0,
            context: "manifold loss is not finite".into(),
        });
    }
    if !with_grad {
        return Ok((parts, Vec::new()));
    }

    let grad = sum_chunk_grads(b, phi.param_count(), |i, g| {
        let p = &passes[i];
        let mut zb = z_bar[i].clone();
        if let Some((_, tape)) = &p.recon {
            if x_bar[i].iter().any(|v| *v != 0.0) {
                let zpb = phi.backward_inverse(tape, &x_bar[i], g)?;
                for j in 0..n {
                    zb[j] += zpb[j];
                }
            }
        }
        if zb.iter().any(|v| *v != 0.0) {
            phi.backward_forward(&p.tape, &zb, 0.0, g)?;
        }
        Ok(())
    })?;
    Ok((parts, grad))
}

/// Mean squared distance between the first `n` output coordinates and the
/// reference rows.
pub fn pretraining_loss(phi: &FlowStack, batch: &Batch) -> Result<(f64, Vec<f64>)> {
    let n = batch
        .references
        .as_ref()
        .ok_or_else(|| Error::arg("pretraining needs reference rows"))?
        .ncols();
    let w = Weights {
        pretrain: 1.0,
        ..Weights::default()
    };
    manifold_objective(phi, n, batch, &w, None, false, true).map(|(p, g)| (p.pretrain, g))
}

/// Mean squared distance between each point and its reconstruction.
pub fn reconstruction_loss(phi: &FlowStack, n: usize, batch: &Batch) -> Result<(f64, Vec<f64>)> {
    let w = Weights {
        recon: 1.0,
        ..Weights::default()
    };
    manifold_objective(phi, n, batch, &w, None, false, true).map(|(p, g)| (p.recon, g))
}

/// Mean over ordered pairs (diagonal included) of the squared gap between
/// reference and latent distances, normalised by `b (b - 1)`.
pub fn pairwise_distance_loss(phi: &FlowStack, n: usize, batch: &Batch) -> Result<(f64, Vec<f64>)> {
    let w = Weights {
        dist: 1.0,
        ..Weights::default()
    };
    manifold_objective(phi, n, batch, &w, None, false, true).map(|(p, g)| (p.dist, g))
}

pub fn manifold_loss(phi: &FlowStack, n: usize, batch: &Batch, lambda: f64) -> Result<(f64, Vec<f64>)> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::arg(format!("lambda {lambda} outside [0, 1]")));
    }
    manifold_objective(phi, n, batch, &Weights::manifold(lambda), None, false, true).map(|(p, g)| (p.total, g))
}

/// Mean squared distance between reconstructions and expected points over
/// the batch samples lying in at least two charts.
pub fn compatibility_loss(phi: &FlowStack, n: usize, batch: &Batch, target: CompatTarget<'_>) -> Result<(f64, Vec<f64>)> {
    let w = Weights {
        compat: 1.0,
        ..Weights::default()
    };
    manifold_objective(phi, n, batch, &w, Some(target), false, true).map(|(p, g)| (p.compat, g))
}

/// Negative log-likelihood of `latents` under `gamma` pushed to a standard
/// normal.
pub fn density_nll(gamma: &FlowStack, latents: ArrayView2<f64>) -> Result<(f64, Vec<f64>)> {
    density_objective(gamma, latents, true)
}

pub fn density_objective(gamma: &FlowStack, latents: ArrayView2<f64>, with_grad: bool) -> Result<(f64, Vec<f64>)> {
    let b = latents.nrows();
    let n = gamma.dim;
    if b == 0 || latents.ncols() != n {
        return Err(Error::arg("latent batch does not match the density flow"));
    }
    if let Some(index) = latents.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            index,
            context: "density latents".into(),
        });
    }
    let half_log_2pi = 0.5 * (2.0 * PI).ln();
    let passes: Vec<(Vec<f64>, f64, Tape)> = run_chunks(b, |i| gamma.forward_taped(&latents.row(i).to_vec()))?;
    let bf = b as f64;
    let mut loss = 0.0;
    for (w, ld, _) in &passes {
        loss += (0.5 * w.iter().map(|x| x * x).sum::<f64>() + n as f64 * half_log_2pi - ld) / bf;
    }
    if !loss.is_finite() {
        return Err(Error::Numeric {
            index: 0,
            context: "density loss is not finite".into(),
        });
    }
    if !with_grad {
        return Ok((loss, Vec::new()));
    }
    let grad = sum_chunk_grads(b, gamma.param_count(), |i, g| {
        let (w, _, tape) = &passes[i];
        let wb: Vec<f64> = w.iter().map(|x| x / bf).collect();
        gamma.backward_forward(tape, &wb, -1.0 / bf, g)?;
        Ok(())
    })?;
    Ok((loss, grad))
}

/// Average of the reconstructions of every point by the charts containing
/// it. `phis[k]` is chart `k`'s coordinate flow.
pub fn expected_points(phis: &[&FlowStack], n: usize, cover: &ChartCover, points: ArrayView2<f64>, epoch: usize) -> Result<ExpectedPoints> {
    if phis.len() != cover.len() {
        return Err(Error::arg("one flow per chart is required"));
    }
    let owners = cover.memberships();
    let d = points.ncols();
    let rows: Vec<Vec<f64>> = run_chunks(points.nrows(), |i| {
        if owners[i].is_empty() {
            return Err(Error::Cover(format!("point {i} is not covered")));
        }
        let mut acc = vec![0.0; d];
        for &k in &owners[i] {
            let r = reconstruct(phis[k], n, points.row(i).as_slice().expect("row-major points"))?;
            acc.iter_mut().zip(&r).for_each(|(a, v)| *a += v);
        }
        let m = owners[i].len() as f64;
        acc.iter_mut().for_each(|a| *a /= m);
        Ok(acc)
    })?;
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Ok(ExpectedPoints {
        points: Array2::from_shape_vec((points.nrows(), d), flat).expect("shape"),
        epoch,
    })
}
