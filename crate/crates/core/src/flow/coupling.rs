use rand::Rng;
use serde::{Deserialize, Serialize};

use super::spline::{Spline, SplineConfig};
use crate::error::{Error, Result};
use crate::nnopt::{Activation, MlpCache, MlpLayout};

/// One spline coupling layer. Parameters are stored outside the layer (in
/// the owning stack's flat buffer) and passed in on every call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingLayer {
    pub dim: usize,
    pub identity_part: Vec<usize>,
    pub transform_part: Vec<usize>,
    pub spline: SplineConfig,
    /// `None` for the one-dimensional case, where the layer is a single
    /// unconditional spline whose raw parameters are trained directly.
    pub conditioner: Option<MlpLayout>,
}

/// Mask of layer `index` in a stack over `dim` coordinates, as
/// `(identity part, transform part)`.
pub fn alternating_mask(dim: usize, index: usize) -> (Vec<usize>, Vec<usize>) {
    match dim {
        1 => (vec![], vec![0]),
        3 => {
            if index % 2 == 0 {
                (vec![0, 1], vec![2])
            } else {
                (vec![2], vec![0, 1])
            }
        }
        _ => {
            let (even, odd): (Vec<usize>, Vec<usize>) = (0..dim).partition(|i| i % 2 == 0);
            if index % 2 == 0 {
                (even, odd)
            } else {
                (odd, even)
            }
        }
    }
}

impl CouplingLayer {
    pub fn new(dim: usize, index: usize, spline: SplineConfig, hidden: &[usize], activation: Activation) -> Result<Self> {
        if dim == 0 {
            return Err(Error::arg("coupling layer over zero coordinates"));
        }
        spline.validate()?;
        let (identity_part, transform_part) = alternating_mask(dim, index);
        let conditioner = if identity_part.is_empty() {
            None
        } else {
            let mut sizes = vec![identity_part.len()];
            sizes.extend_from_slice(hidden);
            sizes.push(transform_part.len() * spline.param_count());
            Some(MlpLayout::new(sizes, activation)?)
        };
        Ok(CouplingLayer {
            dim,
            identity_part,
            transform_part,
            spline,
            conditioner,
        })
    }

    pub fn param_count(&self) -> usize {
        match &self.conditioner {
            Some(layout) => layout.param_count(),
            None => self.spline.param_count(),
        }
    }

    /// Initial parameters; the layer starts as the exact identity.
    pub fn init_params<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        match &self.conditioner {
            Some(layout) => layout.init(rng, true),
            None => self.spline.identity_params(),
        }
    }

    fn raw_into(&self, params: &[f64], output: Option<&[f64]>, buf: &mut Vec<f64>) {
        buf.clear();
        match output {
            None => buf.extend_from_slice(params),
            Some(out) => {
                let p = self.spline.param_count();
                let knots = 2 * self.spline.bins;
                let off = self.spline.derivative_offset();
                buf.extend(out.iter().enumerate().map(|(i, o)| if i % p >= knots { o + off } else { *o }));
            }
        }
    }

    /// Spline parameters for every transformed coordinate, conditioned on
    /// the identity part of `x`. Fills `cache` with the conditioner pass.
    fn condition(&self, params: &[f64], x: &[f64], cache: &mut MlpCache, buf: &mut Vec<f64>) {
        match &self.conditioner {
            None => self.raw_into(params, None, buf),
            Some(layout) => {
                let input: Vec<f64> = self.identity_part.iter().map(|&i| x[i]).collect();
                let out = layout.forward(params, &input, cache);
                self.raw_into(params, Some(out), buf);
            }
        }
    }

    fn check(&self, params: &[f64], x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::arg(format!("layer expects dimension {}, got {}", self.dim, x.len())));
        }
        if params.len() != self.param_count() {
            return Err(Error::arg(format!(
                "layer expects {} parameters, got {}",
                self.param_count(),
                params.len()
            )));
        }
        Ok(())
    }

    pub(crate) fn forward_into(&self, params: &[f64], x: &[f64], y: &mut [f64], cache: &mut MlpCache) -> Result<f64> {
        let mut raw = Vec::new();
        self.condition(params, x, cache, &mut raw);
        let p = self.spline.param_count();
        y.copy_from_slice(x);
        let mut logdet = 0.0;
        for (j, &t) in self.transform_part.iter().enumerate() {
            let s = Spline::new(&self.spline, &raw[j * p..(j + 1) * p])?;
            let (v, l) = s.forward(x[t]);
            y[t] = v;
            logdet += l;
        }
        Ok(logdet)
    }

    pub(crate) fn inverse_into(&self, params: &[f64], y: &[f64], x: &mut [f64], cache: &mut MlpCache) -> Result<f64> {
        let mut raw = Vec::new();
        self.condition(params, y, cache, &mut raw);
        let p = self.spline.param_count();
        x.copy_from_slice(y);
        let mut logdet = 0.0;
        for (j, &t) in self.transform_part.iter().enumerate() {
            let s = Spline::new(&self.spline, &raw[j * p..(j + 1) * p])?;
            let (v, l) = s.inverse(y[t]);
            x[t] = v;
            logdet += l;
        }
        Ok(logdet)
    }

    fn raw_from_cache(&self, params: &[f64], cache: &MlpCache) -> Vec<f64> {
        let mut raw = Vec::new();
        match &self.conditioner {
            None => self.raw_into(params, None, &mut raw),
            Some(_) => self.raw_into(params, Some(cache.output()), &mut raw),
        }
        raw
    }

    fn conditioner_backward(&self, params: &[f64], cache: &MlpCache, raw_bar: &[f64], grad: &mut [f64], input_bar: &mut [f64]) {
        match &self.conditioner {
            None => {
                for (g, r) in grad.iter_mut().zip(raw_bar) {
                    *g += r;
                }
            }
            Some(layout) => {
                let mut gx = vec![0.0; self.identity_part.len()];
                layout.backward(params, cache, raw_bar, grad, &mut gx);
                for (&i, g) in self.identity_part.iter().zip(&gx) {
                    input_bar[i] += g;
                }
            }
        }
    }

    /// Reverse pass of [`forward_into`]: given cotangents of the output and
    /// of the log-determinant, accumulates parameter gradients into `grad`
    /// and writes the input cotangent into `x_bar`.
    pub(crate) fn backward_forward(
        &self,
        params: &[f64],
        x: &[f64],
        cache: &MlpCache,
        y_bar: &[f64],
        logdet_bar: f64,
        grad: &mut [f64],
        x_bar: &mut [f64],
    ) -> Result<()> {
        let raw = self.raw_from_cache(params, cache);
        let p = self.spline.param_count();
        let mut raw_bar = vec![0.0; raw.len()];
        x_bar.copy_from_slice(y_bar);
        for (j, &t) in self.transform_part.iter().enumerate() {
            let s = Spline::new(&self.spline, &raw[j * p..(j + 1) * p])?;
            let local = s.vjp_forward(x[t], y_bar[t], logdet_bar, &mut raw_bar[j * p..(j + 1) * p]);
            x_bar[t] = y_bar[t] * local.dy_dx + logdet_bar * local.dlogdet_dx;
        }
        self.conditioner_backward(params, cache, &raw_bar, grad, x_bar);
        Ok(())
    }

    /// Reverse pass of [`inverse_into`] for the value only.
    pub(crate) fn backward_inverse(
        &self,
        params: &[f64],
        y: &[f64],
        cache: &MlpCache,
        x_bar: &[f64],
        grad: &mut [f64],
        y_bar: &mut [f64],
    ) -> Result<()> {
        let raw = self.raw_from_cache(params, cache);
        let p = self.spline.param_count();
        let mut raw_bar = vec![0.0; raw.len()];
        y_bar.copy_from_slice(x_bar);
        for (j, &t) in self.transform_part.iter().enumerate() {
            let s = Spline::new(&self.spline, &raw[j * p..(j + 1) * p])?;
            let (_, d) = s.vjp_inverse(y[t], x_bar[t], &mut raw_bar[j * p..(j + 1) * p]);
            y_bar[t] = d;
        }
        self.conditioner_backward(params, cache, &raw_bar, grad, y_bar);
        Ok(())
    }
}

pub fn coupling_forward(layer: &CouplingLayer, params: &[f64], x: &[f64]) -> Result<(Vec<f64>, f64)> {
    layer.check(params, x)?;
    let mut y = vec![0.0; x.len()];
    let l = layer.forward_into(params, x, &mut y, &mut MlpCache::default())?;
    Ok((y, l))
}

pub fn coupling_inverse(layer: &CouplingLayer, params: &[f64], y: &[f64]) -> Result<(Vec<f64>, f64)> {
    layer.check(params, y)?;
    let mut x = vec![0.0; y.len()];
    let l = layer.inverse_into(params, y, &mut x, &mut MlpCache::default())?;
    Ok((x, l))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_layer(dim: usize, index: usize, seed: u64) -> (CouplingLayer, Vec<f64>) {
        let layer = CouplingLayer::new(dim, index, SplineConfig::default(), &[8, 8], Activation::Tanh).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = (0..layer.param_count()).map(|_| rng.gen_range(-0.5..0.5)).collect();
        (layer, params)
    }

    #[test]
    fn masks() {
        assert_eq!(alternating_mask(3, 0), (vec![0, 1], vec![2]));
        assert_eq!(alternating_mask(3, 1), (vec![2], vec![0, 1]));
        assert_eq!(alternating_mask(2, 0), (vec![0], vec![1]));
        assert_eq!(alternating_mask(2, 1), (vec![1], vec![0]));
        assert_eq!(alternating_mask(4, 1), (vec![1, 3], vec![0, 2]));
        assert_eq!(alternating_mask(1, 5), (vec![], vec![0]));
    }

    #[test]
    fn fresh_layer_is_identity() {
        for dim in 1..=4 {
            let layer = CouplingLayer::new(dim, 0, SplineConfig::default(), &[16], Activation::Tanh).unwrap();
            let params = layer.init_params(&mut ChaCha8Rng::seed_from_u64(0));
            let x: Vec<f64> = (0..dim).map(|i| 0.3 * i as f64 - 0.4).collect();
            assert_eq!(coupling_forward(&layer, &params, &x).unwrap(), (x.clone(), 0.0));
            assert_eq!(coupling_inverse(&layer, &params, &x).unwrap(), (x.clone(), 0.0));
        }
    }

    #[test]
    fn identity_part_is_copied() {
        let (layer, params) = random_layer(2, 0, 4);
        let (y, _) = coupling_forward(&layer, &params, &[1.3, -0.7]).unwrap();
        assert_eq!(y[0], 1.3);
        assert_ne!(y[1], -0.7);
    }

    #[test]
    fn round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for dim in 1..=4 {
            for index in 0..2 {
                let (layer, params) = random_layer(dim, index, 10 + dim as u64);
                for _ in 0..50 {
                    let x: Vec<f64> = (0..dim).map(|_| rng.gen_range(-4.0..4.0)).collect();
                    let (y, l) = coupling_forward(&layer, &params, &x).unwrap();
                    let (x2, li) = coupling_inverse(&layer, &params, &y).unwrap();
                    for (a, b) in x.iter().zip(&x2) {
                        assert!((a - b).abs() < 1e-9);
                    }
                    assert!((l + li).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn dimension_mismatch() {
        let (layer, params) = random_layer(3, 0, 0);
        assert!(matches!(coupling_forward(&layer, &params, &[1.0]), Err(Error::Argument(_))));
    }
}
