//! Synthetic manifolds (noisy trefoil knot and torus with Gaussian-mixture
//! parameter densities) and a Gaussian kernel density estimate used as the
//! reference density when evaluating generated samples.

use std::f64::consts::{PI, TAU};

use ndarray::{Array2, ArrayView2, Axis};
use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ManifoldKind {
    Trefoil,
    Torus,
}

impl ManifoldKind {
    /// Number of generating parameters (the intrinsic dimension).
    pub fn param_dim(self) -> usize {
        match self {
            ManifoldKind::Trefoil => 1,
            ManifoldKind::Torus => 2,
        }
    }
}

/// One mixture component over the generating parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmComponent {
    pub mean: Vec<f64>,
    pub std: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifoldSpec {
    pub kind: ManifoldKind,
    pub n_points: usize,
    /// Standard deviation of the isotropic ambient noise.
    pub noise_sigma: f64,
    pub gmm: Vec<GmmComponent>,
    pub seed: u64,
}

impl ManifoldSpec {
    /// Two equal components at `0` and `pi` with std `pi/6`, ambient noise 0.1.
    pub fn trefoil(n_points: usize, seed: u64) -> Self {
        let gmm = [0.0, PI]
            .iter()
            .map(|&m| GmmComponent {
                mean: vec![m],
                std: PI / 6.0,
                weight: 0.5,
            })
            .collect();
        ManifoldSpec {
            kind: ManifoldKind::Trefoil,
            n_points,
            noise_sigma: 0.1,
            gmm,
            seed,
        }
    }

    /// Four equal components whose `(t, s)` means are drawn uniformly on
    /// `[-pi, pi]^2` from `seed`, std `pi/3`, ambient noise 0.1.
    pub fn torus(n_points: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let gmm = (0..4)
            .map(|_| GmmComponent {
                mean: vec![rng.gen_range(-PI..PI), rng.gen_range(-PI..PI)],
                std: PI / 3.0,
                weight: 0.25,
            })
            .collect();
        ManifoldSpec {
            kind: ManifoldKind::Torus,
            n_points,
            noise_sigma: 0.1,
            gmm,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_points == 0 {
            return Err(Error::config("n_points must be at least 1"));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::config("noise_sigma must be finite and nonnegative"));
        }
        if self.gmm.is_empty() {
            return Err(Error::config("mixture needs at least one component"));
        }
        let p = self.kind.param_dim();
        for (i, c) in self.gmm.iter().enumerate() {
            if !(c.std.is_finite() && c.std > 0.0) {
                return Err(Error::config(format!("component {i}: std must be positive")));
            }
            if !(c.weight.is_finite() && c.weight > 0.0) {
                return Err(Error::config(format!("component {i}: weight must be positive")));
            }
            if c.mean.len() != p || c.mean.iter().any(|m| !m.is_finite()) {
                return Err(Error::config(format!("component {i}: mean must have {p} finite entries")));
            }
        }
        Ok(())
    }
}

/// Points in `R^d` with optional generating parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Array2<f64>,
    pub params: Option<Array2<f64>>,
}

impl PointCloud {
    pub fn new(points: Array2<f64>) -> Result<Self> {
        if let Some(index) = points.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                index,
                context: "point cloud".into(),
            });
        }
        Ok(PointCloud { points, params: None })
    }

    pub fn with_params(points: Array2<f64>, params: Array2<f64>) -> Result<Self> {
        if params.nrows() != points.nrows() {
            return Err(Error::arg(format!(
                "{} parameter rows for {} points",
                params.nrows(),
                points.nrows()
            )));
        }
        if let Some(index) = params.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                index,
                context: "point parameters".into(),
            });
        }
        let mut cloud = PointCloud::new(points)?;
        cloud.params = Some(params);
        Ok(cloud)
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    /// Rows at `indices`, in order.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            points: self.points.select(Axis(0), indices),
            params: self.params.as_ref().map(|p| p.select(Axis(0), indices)),
        }
    }
}

pub fn trefoil_point(t: f64) -> [f64; 3] {
    [
        t.sin() + 3.0 * (2.0 * t).sin(),
        t.cos() - 3.0 * (2.0 * t).cos(),
        -(3.0 * t).sin(),
    ]
}

pub fn torus_point(t: f64, s: f64) -> [f64; 3] {
    let r = t.cos() + 3.0;
    [r * s.cos(), r * s.sin(), t.sin()]
}

/// Residual of the implicit torus equation `(sqrt(x^2+y^2) - 3)^2 + z^2 - 1`.
pub fn torus_implicit(p: &[f64]) -> f64 {
    let rho = (p[0] * p[0] + p[1] * p[1]).sqrt();
    (rho - 3.0).powi(2) + p[2] * p[2] - 1.0
}

/// Euclidean distance from `p` to the ideal torus surface.
pub fn torus_distance(p: &[f64]) -> f64 {
    let rho = (p[0] * p[0] + p[1] * p[1]).sqrt();
    (((rho - 3.0).powi(2) + p[2] * p[2]).sqrt() - 1.0).abs()
}

/// Distance from `p` to the trefoil curve, by dense sampling of the curve
/// followed by golden-section refinement around the best sample.
pub fn trefoil_distance(p: &[f64]) -> f64 {
    const SAMPLES: usize = 2048;
    let dist2 = |t: f64| {
        let q = trefoil_point(t);
        (0..3).map(|i| (p[i] - q[i]).powi(2)).sum::<f64>()
    };
    let step = TAU / SAMPLES as f64;
    let best = (0..SAMPLES)
        .map(|i| i as f64 * step)
        .min_by(|a, b| dist2(*a).total_cmp(&dist2(*b)))
        .unwrap_or(0.0);
    let (mut lo, mut hi) = (best - step, best + step);
    let g = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..60 {
        let a = hi - g * (hi - lo);
        let b = lo + g * (hi - lo);
        if dist2(a) < dist2(b) {
            hi = b;
        } else {
            lo = a;
        }
    }
    dist2(0.5 * (lo + hi)).sqrt()
}

/// Wraps into `[0, 2pi)`; `rem_euclid` can round up to exactly `2pi`.
fn wrap_angle(x: f64) -> f64 {
    let r = x.rem_euclid(TAU);
    if r >= TAU {
        0.0
    } else {
        r
    }
}

fn sample_params(spec: &ManifoldSpec, rng: &mut ChaCha8Rng) -> Result<Array2<f64>> {
    let p = spec.kind.param_dim();
    let weights: Vec<f64> = spec.gmm.iter().map(|c| c.weight).collect();
    let pick = WeightedIndex::new(&weights).map_err(|e| Error::config(e.to_string()))?;
    let mut params = Array2::zeros((spec.n_points, p));
    for mut row in params.rows_mut() {
        let c = &spec.gmm[pick.sample(rng)];
        let normal = Normal::new(0.0, c.std).map_err(|e| Error::config(e.to_string()))?;
        for j in 0..p {
            row[j] = wrap_angle(c.mean[j] + normal.sample(rng));
        }
    }
    Ok(params)
}

fn generate(spec: &ManifoldSpec, expected: ManifoldKind) -> Result<PointCloud> {
    spec.validate()?;
    if spec.kind != expected {
        return Err(Error::config(format!("spec is for {:?}, not {:?}", spec.kind, expected)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let params = sample_params(spec, &mut rng)?;
    let mut points = Array2::zeros((spec.n_points, 3));
    for (i, row) in params.rows().into_iter().enumerate() {
        let q = match spec.kind {
            ManifoldKind::Trefoil => trefoil_point(row[0]),
            ManifoldKind::Torus => torus_point(row[0], row[1]),
        };
        for j in 0..3 {
            points[[i, j]] = q[j];
        }
    }
    if spec.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::config(e.to_string()))?;
        points.mapv_inplace(|x| x + noise.sample(&mut rng));
    }
    Ok(PointCloud {
        points,
        params: Some(params),
    })
}

pub fn gen_trefoil(spec: &ManifoldSpec) -> Result<PointCloud> {
    generate(spec, ManifoldKind::Trefoil)
}

pub fn gen_torus(spec: &ManifoldSpec) -> Result<PointCloud> {
    generate(spec, ManifoldKind::Torus)
}

pub fn generate_manifold(spec: &ManifoldSpec) -> Result<PointCloud> {
    generate(spec, spec.kind)
}

/// Per-dimension bandwidths by Scott's rule, `sigma_j * N^(-1/(d+4))`.
pub fn scott_bandwidth(reference: ArrayView2<f64>) -> Vec<f64> {
    let n = reference.nrows().max(1) as f64;
    let d = reference.ncols() as f64;
    let factor = n.powf(-1.0 / (d + 4.0));
    reference
        .std_axis(Axis(0), 0.0)
        .iter()
        .map(|s| (s * factor).max(1e-12))
        .collect()
}

/// Gaussian KDE with a single isotropic bandwidth.
pub fn kde_density(reference: ArrayView2<f64>, queries: ArrayView2<f64>, bandwidth: f64) -> Result<Vec<f64>> {
    let h = vec![bandwidth; reference.ncols()];
    kde_density_diag(reference, queries, &h)
}

/// Gaussian KDE with a diagonal bandwidth; each kernel integrates to one.
pub fn kde_density_diag(reference: ArrayView2<f64>, queries: ArrayView2<f64>, bandwidth: &[f64]) -> Result<Vec<f64>> {
    let d = reference.ncols();
    if reference.nrows() == 0 {
        return Err(Error::arg("KDE needs a nonempty reference cloud"));
    }
    if queries.ncols() != d || bandwidth.len() != d {
        return Err(Error::arg(format!(
            "KDE dimension mismatch: reference {d}, queries {}, bandwidth {}",
            queries.ncols(),
            bandwidth.len()
        )));
    }
    if bandwidth.iter().any(|h| !(h.is_finite() && *h > 0.0)) {
        return Err(Error::arg("KDE bandwidth must be positive"));
    }
    let inv_h: Vec<f64> = bandwidth.iter().map(|h| 1.0 / h).collect();
    let log_norm = -0.5 * d as f64 * (2.0 * PI).ln() + inv_h.iter().map(|x| x.ln()).sum::<f64>();
    let norm = log_norm.exp() / reference.nrows() as f64;
    use rayon::prelude::*;
    let out = (0..queries.nrows())
        .into_par_iter()
        .map(|i| {
            let q = queries.row(i);
            let mut acc = 0.0;
            for r in reference.outer_iter() {
                let mut e = 0.0f64;
                for j in 0..d {
                    let z = (q[j] - r[j]) * inv_h[j];
                    e += z * z;
                }
                acc += (-0.5 * e).exp();
            }
            acc * norm
        })
        .collect();
    Ok(out)
}
