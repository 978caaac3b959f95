//! The trained artifact: one coordinate flow and one density flow per chart,
//! chart weights from the disintegration of the data measure, and the
//! operations that use them (sampling, densities, checkpoints).

mod config;
mod train;

use std::f64::consts::PI;
use std::path::Path;

use ndarray::Array2;
use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::cover::{refine_partition, ChartCover, RefinedPartition};
use crate::error::{Error, Result};
use crate::flow::{embedding_gram_logdet, reconstruct, FlowStack};
use crate::io::parse_versioned;
use crate::synth::PointCloud;

pub use config::{Epochs, TrainConfig};
pub use train::{train, train_with_report, LogRow, TrainReport};

pub const FORMAT_VERSION: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChartModel {
    pub id: usize,
    pub members: Vec<usize>,
    /// Coordinate flow on the ambient space.
    pub phi: FlowStack,
    /// Density flow on the chart's latent space.
    pub gamma: FlowStack,
    /// Chart mass `c_k`.
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtlasModel {
    pub format_version: u64,
    pub ambient_dim: usize,
    pub latent_dim: usize,
    pub charts: Vec<ChartModel>,
    pub cover: ChartCover,
    pub partition: RefinedPartition,
    pub config: TrainConfig,
}

/// Chart masses `c_k = sum over cells owned by k of nu / n`, and for each
/// chart the relative weight of each owned cell, as `(cell index, weight)`.
///
/// Masses are computed from integer counts over a common denominator, so
/// they are the correctly rounded values of the exact fractions.
pub fn disintegration_weights(part: &RefinedPartition, charts: usize) -> Result<(Vec<f64>, Vec<Vec<(usize, f64)>>)> {
    let max_n = part.cells.iter().map(|c| c.n).max().unwrap_or(1).max(1) as u128;
    let mut lcm: u128 = 1;
    for n in 1..=max_n {
        lcm = lcm / gcd(lcm, n) * n;
    }
    let total: u128 = part.cells.iter().map(|c| c.indices.len() as u128).sum();
    let mut numer = vec![0u128; charts];
    for cell in &part.cells {
        if cell.n == 0 || cell.signature.len() != cell.n {
            return Err(Error::arg("cell owner count does not match its signature"));
        }
        for &k in &cell.signature {
            if k >= charts {
                return Err(Error::arg(format!("cell refers to chart {k} of {charts}")));
            }
            numer[k] += cell.indices.len() as u128 * (lcm / cell.n as u128);
        }
    }
    let denom = (lcm * total) as f64;
    let weights: Vec<f64> = numer.iter().map(|&x| x as f64 / denom).collect();
    if let Some(chart) = weights.iter().position(|w| *w <= 0.0) {
        return Err(Error::DegenerateChart { chart });
    }
    let mut cells = vec![Vec::new(); charts];
    for (ci, cell) in part.cells.iter().enumerate() {
        let share = cell.nu / cell.n as f64;
        for &k in &cell.signature {
            cells[k].push((ci, share / weights[k]));
        }
    }
    Ok((weights, cells))
}

fn gcd(a: u128, b: u128) -> u128 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Sampling probabilities proportional to `1 / m_x` over a chart's members.
pub fn bootstrap_probabilities(members: &[usize], multiplicity: &[usize]) -> Vec<f64> {
    let raw: Vec<f64> = members.iter().map(|&i| 1.0 / multiplicity[i] as f64).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|p| p / total).collect()
}

/// Draws `b` positions in `members` with replacement, with probability
/// proportional to `1 / m_x`.
pub fn bootstrap_batch<R: Rng>(members: &[usize], multiplicity: &[usize], b: usize, rng: &mut R) -> Result<Vec<usize>> {
    if members.is_empty() {
        return Err(Error::arg("cannot bootstrap an empty chart"));
    }
    let dist = WeightedIndex::new(members.iter().map(|&i| 1.0 / multiplicity[i] as f64)).map_err(|e| Error::arg(e.to_string()))?;
    Ok((0..b).map(|_| dist.sample(rng)).collect())
}

impl AtlasModel {
    pub fn new(cover: ChartCover, charts: Vec<ChartModel>, config: TrainConfig) -> Result<Self> {
        if charts.is_empty() || charts.len() != cover.len() {
            return Err(Error::arg("one chart model per cover chart is required"));
        }
        let partition = refine_partition(&cover);
        let (weights, _) = disintegration_weights(&partition, cover.len())?;
        let ambient_dim = charts[0].phi.dim;
        let charts = charts
            .into_iter()
            .zip(weights)
            .map(|(c, weight)| ChartModel { weight, ..c })
            .collect();
        Ok(AtlasModel {
            format_version: FORMAT_VERSION,
            ambient_dim,
            latent_dim: config.latent_dim,
            charts,
            cover,
            partition,
            config,
        })
    }

    pub fn weights(&self) -> Vec<f64> {
        self.charts.iter().map(|c| c.weight).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model serialises")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: AtlasModel = parse_versioned(text, FORMAT_VERSION)?;
        if model.charts.len() != model.cover.len() {
            return Err(Error::arg("checkpoint chart count does not match its cover"));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Reconstruction of `x` by chart `k`.
    pub fn reconstruct(&self, k: usize, x: &[f64]) -> Result<Vec<f64>> {
        reconstruct(&self.charts[k].phi, self.latent_dim, x)
    }

    /// Generates `count` points, returning them with the chart each came
    /// from.
    pub fn sample<R: Rng>(&self, count: usize, rng: &mut R) -> Result<(PointCloud, Vec<usize>)> {
        sample(self, count, rng)
    }
}

pub fn sample<R: Rng>(model: &AtlasModel, count: usize, rng: &mut R) -> Result<(PointCloud, Vec<usize>)> {
    let n = model.latent_dim;
    let d = model.ambient_dim;
    let pick = WeightedIndex::new(model.weights()).map_err(|e| Error::arg(e.to_string()))?;
    let mut flat = Vec::with_capacity(count * d);
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        let k = pick.sample(rng);
        let w: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let chart = &model.charts[k];
        let (v, _) = chart.gamma.inverse(&w)?;
        let mut z = vec![0.0; d];
        z[..n].copy_from_slice(&v);
        let (x, _) = chart.phi.inverse(&z)?;
        flat.extend(x);
        labels.push(k);
    }
    let points = Array2::from_shape_vec((count, d), flat).expect("shape");
    Ok((PointCloud::new(points)?, labels))
}

/// Log density of chart `k`'s model at `x`: the latent density pulled back
/// through `gamma`, corrected by the volume of the embedding
/// `v -> phi^-1(v, 0)`.
pub fn log_density(model: &AtlasModel, x: &[f64], k: usize) -> Result<f64> {
    let chart = model.charts.get(k).ok_or_else(|| Error::arg(format!("no chart {k}")))?;
    let n = model.latent_dim;
    let (z, _) = chart.phi.forward(x)?;
    let v = &z[..n];
    let (w, ld) = chart.gamma.forward(v)?;
    let log_normal = -0.5 * w.iter().map(|a| a * a).sum::<f64>() - 0.5 * n as f64 * (2.0 * PI).ln();
    Ok(log_normal + ld - embedding_gram_logdet(&chart.phi, n, v)?)
}

/// Log of `sum_k c_k p_k(x)` over the charts whose reconstruction of `x`
/// lies within the configured membership threshold (the best chart alone
/// when none does).
pub fn log_density_mixture(model: &AtlasModel, x: &[f64]) -> Result<f64> {
    let threshold = model.config.membership_threshold;
    let mut errs = Vec::with_capacity(model.charts.len());
    for (k, chart) in model.charts.iter().enumerate() {
        if chart.weight <= 0.0 {
            continue;
        }
        let r = reconstruct(&chart.phi, model.latent_dim, x)?;
        let e = r.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        errs.push((k, e));
    }
    let mut members: Vec<usize> = errs.iter().filter(|(_, e)| *e < threshold).map(|(k, _)| *k).collect();
    if members.is_empty() {
        let best = errs
            .iter()
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .ok_or_else(|| Error::arg("model has no charts with positive weight"))?;
        members.push(best.0);
    }
    let terms: Vec<f64> = members
        .iter()
        .map(|&k| Ok(model.charts[k].weight.ln() + log_density(model, x, k)?))
        .collect::<Result<_>>()?;
    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln())
}

/// Latent code of `x` in chart `k`.
pub fn encode(model: &AtlasModel, k: usize, x: &[f64]) -> Result<Vec<f64>> {
    let chart = model.charts.get(k).ok_or_else(|| Error::arg(format!("no chart {k}")))?;
    let (z, _) = chart.phi.forward(x)?;
    Ok(z[..model.latent_dim].to_vec())
}
