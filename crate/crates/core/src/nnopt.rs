//! Multilayer perceptrons with hand-written reverse-mode gradients, and the
//! optimizer pieces used in training: Adam with decoupled weight decay,
//! global-norm clipping and a cosine-annealed learning rate.
//!
//! Parameters live in flat `f64` buffers so that a whole flow (many
//! conditioners) can be updated by a single optimizer state.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let e = (-2.0 * x.abs()).exp_m1();
                (-e / (e + 2.0)).copysign(x)
            }
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the activation output.
    #[inline]
    fn grad_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Dot product with independent partial sums, which lets the compiler keep
/// several multiply-adds in flight.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 8];
    let mut i = 0;
    while i + 8 <= n {
        let (x, y) = (&a[i..i + 8], &b[i..i + 8]);
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
        i += 8;
    }
    let mut tail = 0.0;
    while i < n {
        tail += a[i] * b[i];
        i += 1;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// Shape of a fully connected network: affine layers between `sizes`,
/// hidden activations, linear output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpLayout {
    pub sizes: Vec<usize>,
    pub activation: Activation,
}

/// Activations of the last forward pass, reused by the backward pass.
#[derive(Debug, Clone, Default)]
pub struct MlpCache {
    acts: Vec<Vec<f64>>,
}

impl MlpCache {
    pub fn output(&self) -> &[f64] {
        self.acts.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

impl MlpLayout {
    pub fn new(sizes: Vec<usize>, activation: Activation) -> Result<Self> {
        if sizes.len() < 2 || sizes.iter().any(|&s| s == 0) {
            return Err(Error::arg(format!("invalid layer sizes {sizes:?}")));
        }
        Ok(MlpLayout { sizes, activation })
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("validated")
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Offset of layer `l`'s weight block; its bias follows the weights.
    fn layer_offset(&self, l: usize) -> usize {
        self.sizes[..=l].windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Uniform(+-1/sqrt(fan_in)) weights, zero biases. With `zero_output`
    /// the last layer starts at exactly zero.
    pub fn init<R: Rng>(&self, rng: &mut R, zero_output: bool) -> Vec<f64> {
        let mut params = vec![0.0; self.param_count()];
        for l in 0..self.num_layers() {
            if zero_output && l + 1 == self.num_layers() {
                continue;
            }
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let bound = 1.0 / (n_in as f64).sqrt();
            let off = self.layer_offset(l);
            for w in &mut params[off..off + n_in * n_out] {
                *w = rng.gen_range(-bound..bound);
            }
        }
        params
    }

    pub fn forward<'c>(&self, params: &[f64], x: &[f64], cache: &'c mut MlpCache) -> &'c [f64] {
        debug_assert_eq!(params.len(), self.param_count());
        debug_assert_eq!(x.len(), self.input_dim());
        let layers = self.num_layers();
        cache.acts.resize_with(layers + 1, Vec::new);
        cache.acts[0].clear();
        cache.acts[0].extend_from_slice(x);
        let mut off = 0;
        for l in 0..layers {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let (w, rest) = params[off..].split_at(n_in * n_out);
            let b = &rest[..n_out];
            let (before, after) = cache.acts.split_at_mut(l + 1);
            let input = &before[l];
            let out = &mut after[0];
            out.clear();
            for o in 0..n_out {
                let acc = b[o] + dot(&w[o * n_in..(o + 1) * n_in], input);
                out.push(if l + 1 < layers { self.activation.apply(acc) } else { acc });
            }
            off += n_in * n_out + n_out;
        }
        cache.output()
    }

    /// Accumulates `cot^T d(out)/d(params)` into `grad_params` and
    /// `cot^T d(out)/d(x)` into `grad_x`, using the activations in `cache`.
    pub fn backward(&self, params: &[f64], cache: &MlpCache, cot: &[f64], grad_params: &mut [f64], grad_x: &mut [f64]) {
        let layers = self.num_layers();
        let mut delta = cot.to_vec();
        let mut next = Vec::new();
        for l in (0..layers).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let off = self.layer_offset(l);
            if l + 1 < layers {
                for (d, a) in delta.iter_mut().zip(&cache.acts[l + 1]) {
                    *d *= self.activation.grad_from_output(*a);
                }
            }
            let input = &cache.acts[l][..n_in];
            let w = &params[off..off + n_in * n_out];
            let (gw, gb) = grad_params[off..off + n_in * n_out + n_out].split_at_mut(n_in * n_out);
            next.clear();
            next.resize(n_in, 0.0);
            let target = &mut next[..n_in];
            for o in 0..n_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                gb[o] += d;
                let g_row = &mut gw[o * n_in..(o + 1) * n_in];
                let w_row = &w[o * n_in..(o + 1) * n_in];
                for i in 0..n_in {
                    g_row[i] += d * input[i];
                    target[i] += w_row[i] * d;
                }
            }
            std::mem::swap(&mut delta, &mut next);
        }
        for (g, d) in grad_x.iter_mut().zip(&delta) {
            *g += d;
        }
    }
}

/// A network together with its parameter values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layout: MlpLayout,
    pub values: Vec<f64>,
}

impl MlpParams {
    pub fn new(layout: MlpLayout, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.param_count() {
            return Err(Error::arg(format!(
                "expected {} parameters, got {}",
                layout.param_count(),
                values.len()
            )));
        }
        Ok(MlpParams { layout, values })
    }

    /// Row-major `(out, in)` weight block of layer `l`.
    pub fn weights(&self, l: usize) -> &[f64] {
        let off = self.layout.layer_offset(l);
        &self.values[off..off + self.layout.sizes[l] * self.layout.sizes[l + 1]]
    }

    pub fn bias(&self, l: usize) -> &[f64] {
        let off = self.layout.layer_offset(l) + self.layout.sizes[l] * self.layout.sizes[l + 1];
        &self.values[off..off + self.layout.sizes[l + 1]]
    }
}

pub fn mlp_forward(params: &MlpParams, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != params.layout.input_dim() {
        return Err(Error::arg(format!(
            "input has {} entries, network expects {}",
            x.len(),
            params.layout.input_dim()
        )));
    }
    let mut cache = MlpCache::default();
    Ok(params.layout.forward(&params.values, x, &mut cache).to_vec())
}

/// Gradients of `cotangent . mlp(x)` with respect to the parameters and `x`.
pub fn mlp_vjp(params: &MlpParams, x: &[f64], cotangent: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if cotangent.len() != params.layout.output_dim() {
        return Err(Error::arg(format!(
            "cotangent has {} entries, network outputs {}",
            cotangent.len(),
            params.layout.output_dim()
        )));
    }
    if x.len() != params.layout.input_dim() {
        return Err(Error::arg("input dimension mismatch"));
    }
    let mut cache = MlpCache::default();
    params.layout.forward(&params.values, x, &mut cache);
    let mut gp = vec![0.0; params.values.len()];
    let mut gx = vec![0.0; x.len()];
    params.layout.backward(&params.values, &cache, cotangent, &mut gp, &mut gx);
    Ok((gp, gx))
}

/// Adam moments plus hyperparameters; decay is decoupled from the gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamState {
    pub fn new(len: usize, weight_decay: f64) -> Self {
        AdamState {
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        adam_step(self, params, grads, lr)
    }
}

pub fn adam_step(state: &mut AdamState, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::arg("Adam state, parameter and gradient shapes differ"));
    }
    if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric {
            index,
            context: "gradient".into(),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let decay = lr * state.weight_decay;
    for i in 0..params.len() {
        let g = grads[i];
        params[i] -= decay * params[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

/// Rescales `grads` so their joint l2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    assert!(max_norm > 0.0, "max_norm must be positive");
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= scale);
    }
    norm
}

/// Cosine annealing from `initial` at step 0 down to 0 at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn new(initial: f64, total_steps: usize) -> Result<Self> {
        if !(initial.is_finite() && initial > 0.0) || total_steps == 0 {
            return Err(Error::config("learning-rate schedule needs a positive rate and step count"));
        }
        Ok(LrSchedule { initial, total_steps })
    }

    pub fn lr_at(&self, step: usize) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::arg(format!("step {step} beyond schedule end {}", self.total_steps)));
        }
        let frac = step as f64 / self.total_steps as f64;
        Ok(self.initial * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))
    }
}
