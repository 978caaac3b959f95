use rand::Rng;
use serde::{Deserialize, Serialize};

use super::coupling::CouplingLayer;
use super::FlowConfig;
use crate::error::{Error, Result};
use crate::linalg::jacobi_eigen;
use crate::nnopt::MlpCache;

/// Fixed affine wrapper around the coupling layers:
/// `f(x) = post * F(R^T (x - center) / scale)`.
///
/// `rotation` is orthogonal (row-major, columns are the frame axes), so the
/// only volume change comes from the two diagonal scalings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub center: Vec<f64>,
    pub rotation: Option<Vec<f64>>,
    pub scale: Vec<f64>,
    pub post_scale: Vec<f64>,
}

impl Normalization {
    pub fn identity(dim: usize) -> Self {
        Normalization {
            center: vec![0.0; dim],
            rotation: None,
            scale: vec![1.0; dim],
            post_scale: vec![1.0; dim],
        }
    }

    fn validate(&self, dim: usize) -> Result<()> {
        if self.center.len() != dim || self.scale.len() != dim || self.post_scale.len() != dim {
            return Err(Error::arg("normalization dimension mismatch"));
        }
        if let Some(r) = &self.rotation {
            if r.len() != dim * dim {
                return Err(Error::arg("rotation must be dim x dim"));
            }
        }
        if self.scale.iter().chain(&self.post_scale).any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::arg("normalization scales must be positive"));
        }
        Ok(())
    }

    fn logdet(&self) -> f64 {
        self.post_scale.iter().map(|s| s.ln()).sum::<f64>() - self.scale.iter().map(|s| s.ln()).sum::<f64>()
    }

    fn pre(&self, x: &[f64]) -> Vec<f64> {
        let d = x.len();
        let c: Vec<f64> = x.iter().zip(&self.center).map(|(a, b)| a - b).collect();
        let mut u = match &self.rotation {
            None => c,
            Some(r) => (0..d).map(|j| (0..d).map(|i| r[i * d + j] * c[i]).sum()).collect(),
        };
        u.iter_mut().zip(&self.scale).for_each(|(v, s)| *v /= s);
        u
    }

    fn pre_inverse(&self, u: &[f64]) -> Vec<f64> {
        let d = u.len();
        let s: Vec<f64> = u.iter().zip(&self.scale).map(|(a, b)| a * b).collect();
        let mut x = match &self.rotation {
            None => s,
            Some(r) => (0..d).map(|i| (0..d).map(|j| r[i * d + j] * s[j]).sum()).collect(),
        };
        x.iter_mut().zip(&self.center).for_each(|(v, c)| *v += c);
        x
    }

    /// Cotangent of `x` given the cotangent of `u = pre(x)`.
    fn pre_backward(&self, u_bar: &[f64]) -> Vec<f64> {
        let d = u_bar.len();
        let s: Vec<f64> = u_bar.iter().zip(&self.scale).map(|(a, b)| a / b).collect();
        match &self.rotation {
            None => s,
            Some(r) => (0..d).map(|i| (0..d).map(|j| r[i * d + j] * s[j]).sum()).collect(),
        }
    }

    /// Cotangent of `u` given the cotangent of `x = pre_inverse(u)`.
    fn pre_inverse_backward(&self, x_bar: &[f64]) -> Vec<f64> {
        let d = x_bar.len();
        let mut u: Vec<f64> = match &self.rotation {
            None => x_bar.to_vec(),
            Some(r) => (0..d).map(|j| (0..d).map(|i| r[i * d + j] * x_bar[i]).sum()).collect(),
        };
        u.iter_mut().zip(&self.scale).for_each(|(v, s)| *v *= s);
        u
    }
}

/// Intermediate values of one pass through a stack, in the order the
/// layers were applied.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    inputs: Vec<Vec<f64>>,
    caches: Vec<MlpCache>,
}

/// A composition of spline coupling layers with alternating masks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowStack {
    pub dim: usize,
    pub layers: Vec<CouplingLayer>,
    pub params: Vec<f64>,
    pub normalization: Normalization,
}

impl FlowStack {
    /// A stack that starts as the exact identity map.
    pub fn new<R: Rng>(dim: usize, cfg: &FlowConfig, rng: &mut R) -> Result<Self> {
        if cfg.layers == 0 {
            return Err(Error::config("a flow needs at least one layer"));
        }
        let mut layers = Vec::with_capacity(cfg.layers);
        let mut params = Vec::new();
        for index in 0..cfg.layers {
            let layer = CouplingLayer::new(dim, index, cfg.spline, &cfg.hidden, cfg.activation)?;
            params.extend(layer.init_params(rng));
            layers.push(layer);
        }
        Ok(FlowStack {
            dim,
            layers,
            params,
            normalization: Normalization::identity(dim),
        })
    }

    pub fn set_normalization(&mut self, normalization: Normalization) -> Result<()> {
        normalization.validate(self.dim)?;
        self.normalization = normalization;
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn ranges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.layers.iter().scan(0, |off, l| {
            let start = *off;
            *off += l.param_count();
            Some((start, *off))
        })
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::arg(format!("flow expects dimension {}, got {}", self.dim, x.len())));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.forward_taped(x).map(|(z, l, _)| (z, l))
    }

    pub fn inverse(&self, z: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.inverse_taped(z).map(|(x, l, _)| (x, l))
    }

    pub fn forward_taped(&self, x: &[f64]) -> Result<(Vec<f64>, f64, Tape)> {
        self.check_dim(x)?;
        let mut u = self.normalization.pre(x);
        let mut next = vec![0.0; self.dim];
        let mut logdet = self.normalization.logdet();
        let mut tape = Tape::default();
        for (layer, (a, b)) in self.layers.iter().zip(self.ranges()) {
            let mut cache = MlpCache::default();
            logdet += layer.forward_into(&self.params[a..b], &u, &mut next, &mut cache)?;
            tape.inputs.push(std::mem::replace(&mut u, next.clone()));
            tape.caches.push(cache);
        }
        u.iter_mut().zip(&self.normalization.post_scale).for_each(|(v, s)| *v *= s);
        Ok((u, logdet, tape))
    }

    pub fn inverse_taped(&self, z: &[f64]) -> Result<(Vec<f64>, f64, Tape)> {
        self.check_dim(z)?;
        let mut w: Vec<f64> = z.iter().zip(&self.normalization.post_scale).map(|(a, s)| a / s).collect();
        let mut next = vec![0.0; self.dim];
        let mut logdet = -self.normalization.logdet();
        let mut tape = Tape::default();
        let ranges: Vec<_> = self.ranges().collect();
        for (layer, &(a, b)) in self.layers.iter().zip(&ranges).rev() {
            let mut cache = MlpCache::default();
            logdet += layer.inverse_into(&self.params[a..b], &w, &mut next, &mut cache)?;
            tape.inputs.push(std::mem::replace(&mut w, next.clone()));
            tape.caches.push(cache);
        }
        Ok((self.normalization.pre_inverse(&w), logdet, tape))
    }

    /// Reverse pass of [`forward_taped`]. Accumulates parameter gradients
    /// of `z_bar . z + logdet_bar * logdet` into `grad` and returns the
    /// input cotangent.
    pub fn backward_forward(&self, tape: &Tape, z_bar: &[f64], logdet_bar: f64, grad: &mut [f64]) -> Result<Vec<f64>> {
        let mut u_bar: Vec<f64> = z_bar.iter().zip(&self.normalization.post_scale).map(|(a, s)| a * s).collect();
        let mut x_bar = vec![0.0; self.dim];
        let ranges: Vec<_> = self.ranges().collect();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let (a, b) = ranges[l];
            layer.backward_forward(
                &self.params[a..b],
                &tape.inputs[l],
                &tape.caches[l],
                &u_bar,
                logdet_bar,
                &mut grad[a..b],
                &mut x_bar,
            )?;
            std::mem::swap(&mut u_bar, &mut x_bar);
        }
        Ok(self.normalization.pre_backward(&u_bar))
    }

    /// Reverse pass of [`inverse_taped`] for the output value. Returns the
    /// cotangent of the latent input.
    pub fn backward_inverse(&self, tape: &Tape, x_bar: &[f64], grad: &mut [f64]) -> Result<Vec<f64>> {
        let mut w_bar = self.normalization.pre_inverse_backward(x_bar);
        let mut y_bar = vec![0.0; self.dim];
        let ranges: Vec<_> = self.ranges().collect();
        let last = self.layers.len() - 1;
        // The tape records layers in reverse order.
        for (l, layer) in self.layers.iter().enumerate() {
            let t = last - l;
            let (a, b) = ranges[l];
            layer.backward_inverse(&self.params[a..b], &tape.inputs[t], &tape.caches[t], &w_bar, &mut grad[a..b], &mut y_bar)?;
            std::mem::swap(&mut w_bar, &mut y_bar);
        }
        Ok(w_bar.iter().zip(&self.normalization.post_scale).map(|(a, s)| a / s).collect())
    }
}

pub fn stack_forward(f: &FlowStack, x: &[f64]) -> Result<(Vec<f64>, f64)> {
    f.forward(x)
}

pub fn stack_inverse(f: &FlowStack, z: &[f64]) -> Result<(Vec<f64>, f64)> {
    f.inverse(z)
}

/// Keeps the first `n` coordinates and zeroes the rest.
pub fn project(v: &[f64], n: usize) -> Result<Vec<f64>> {
    if n == 0 || n > v.len() {
        return Err(Error::arg(format!("latent dimension {n} out of range 1..={}", v.len())));
    }
    let mut out = v.to_vec();
    out[n..].iter_mut().for_each(|x| *x = 0.0);
    Ok(out)
}

/// `f^-1(Proj(f(x)))`: the point of the chart surface that `x` maps to.
pub fn reconstruct(f: &FlowStack, n: usize, x: &[f64]) -> Result<Vec<f64>> {
    let (z, _) = f.forward(x)?;
    let (x, _) = f.inverse(&project(&z, n)?)?;
    Ok(x)
}

/// Half the log-determinant of `J^T J`, where `J` is the Jacobian of the
/// embedding `v -> f^-1(v, 0)` from `R^n` into `R^d`.
pub fn embedding_gram_logdet(f: &FlowStack, n: usize, v: &[f64]) -> Result<f64> {
    if n == 0 || n > f.dim || v.len() != n {
        return Err(Error::arg(format!("latent vector of length {} for n = {n}, d = {}", v.len(), f.dim)));
    }
    let jac = embedding_jacobian(f, v, 1e-5)?;
    gram_half_logdet(&jac, f.dim, n)
}

/// Central-difference Jacobian of the embedding, stored column-major
/// (`n` columns of length `d`).
pub(crate) fn embedding_jacobian(f: &FlowStack, v: &[f64], h: f64) -> Result<Vec<f64>> {
    let (d, n) = (f.dim, v.len());
    let mut jac = Vec::with_capacity(d * n);
    let mut z = vec![0.0; d];
    z[..n].copy_from_slice(v);
    for j in 0..n {
        let mut zp = z.clone();
        zp[j] += h;
        let mut zm = z.clone();
        zm[j] -= h;
        let (xp, _) = f.inverse(&zp)?;
        let (xm, _) = f.inverse(&zm)?;
        jac.extend(xp.iter().zip(&xm).map(|(a, b)| (a - b) / (2.0 * h)));
    }
    Ok(jac)
}

pub(crate) fn gram_half_logdet(jac: &[f64], d: usize, n: usize) -> Result<f64> {
    let mut gram = ndarray::Array2::<f64>::zeros((n, n));
    for a in 0..n {
        for b in 0..n {
            gram[[a, b]] = (0..d).map(|i| jac[a * d + i] * jac[b * d + i]).sum();
        }
    }
    let eig = jacobi_eigen(gram.view(), 1e-15)?;
    if eig.values.iter().any(|l| !(*l > 0.0) || !l.is_finite()) {
        return Err(Error::Numeric {
            index: 0,
            context: "embedding Gram matrix is singular".into(),
        });
    }
    Ok(0.5 * eig.values.iter().map(|l| l.ln()).sum::<f64>())
}
