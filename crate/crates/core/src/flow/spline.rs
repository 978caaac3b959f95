//! Monotone rational-quadratic splines on `[-B, B]` with identity tails.
//!
//! A spline is described by `3K - 1` unconstrained numbers: `K` bin-width
//! logits, `K` bin-height logits and `K - 1` interior knot-derivative
//! pre-activations. Boundary derivatives are fixed to one so the map is
//! continuously differentiable where it meets the linear tails.

use std::ops::{Add, Div, Mul, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper limit on bins so knot buffers can live on the stack.
pub const MAX_BINS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplineConfig {
    pub bins: usize,
    pub bound: f64,
    pub min_bin_width: f64,
    pub min_bin_height: f64,
    pub min_derivative: f64,
}

impl Default for SplineConfig {
    fn default() -> Self {
        SplineConfig {
            bins: 8,
            bound: 5.0,
            min_bin_width: 1e-3,
            min_bin_height: 1e-3,
            min_derivative: 1e-3,
        }
    }
}

impl SplineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bins == 0 || self.bins > MAX_BINS {
            return Err(Error::config(format!("spline bins must be in 1..={MAX_BINS}")));
        }
        if !(self.bound.is_finite() && self.bound > 0.0) {
            return Err(Error::config("spline bound must be positive"));
        }
        let k = self.bins as f64;
        if !(self.min_bin_width >= 0.0 && self.min_bin_width * k < 1.0)
            || !(self.min_bin_height >= 0.0 && self.min_bin_height * k < 1.0)
        {
            return Err(Error::config("minimum bin sizes leave no free mass"));
        }
        if !(self.min_derivative >= 0.0 && self.min_derivative < 1.0) {
            return Err(Error::config("min_derivative must be in [0, 1)"));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        3 * self.bins - 1
    }

    /// Pre-activation giving a unit interior derivative.
    pub fn derivative_offset(&self) -> f64 {
        ((1.0 - self.min_derivative).exp() - 1.0).ln()
    }

    /// Raw parameters of the identity map: equal bins, unit derivatives.
    pub fn identity_params(&self) -> Vec<f64> {
        let mut raw = vec![0.0; self.param_count()];
        let off = self.derivative_offset();
        raw[2 * self.bins..].iter_mut().for_each(|v| *v = off);
        raw
    }
}

/// A single spline: configuration plus raw parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RqSplineParams {
    pub config: SplineConfig,
    pub raw: Vec<f64>,
}

impl RqSplineParams {
    pub fn identity(config: SplineConfig) -> Self {
        RqSplineParams {
            raw: config.identity_params(),
            config,
        }
    }

    fn spline(&self) -> Result<Spline<'_>> {
        if self.raw.len() != self.config.param_count() {
            return Err(Error::arg(format!(
                "spline with {} bins needs {} parameters, got {}",
                self.config.bins,
                self.config.param_count(),
                self.raw.len()
            )));
        }
        Spline::new(&self.config, &self.raw)
    }
}

/// Value and log-derivative at `x`.
pub fn spline_forward(p: &RqSplineParams, x: f64) -> Result<(f64, f64)> {
    Ok(p.spline()?.forward(x))
}

/// Pre-image of `y` and the log-derivative of the inverse there.
pub fn spline_inverse(p: &RqSplineParams, y: f64) -> Result<(f64, f64)> {
    Ok(p.spline()?.inverse(y))
}

/// Derivatives of the forward value and log-derivative at a point.
#[derive(Debug, Clone, PartialEq)]
pub struct SplineGrad {
    pub y: f64,
    pub logdet: f64,
    pub dy_dx: f64,
    pub dlogdet_dx: f64,
    pub dy_dparams: Vec<f64>,
    pub dlogdet_dparams: Vec<f64>,
}

pub fn spline_gradients(p: &RqSplineParams, x: f64) -> Result<SplineGrad> {
    let s = p.spline()?;
    let n = p.raw.len();
    let mut dy = vec![0.0; n];
    let mut dl = vec![0.0; n];
    let local = s.vjp_forward(x, 1.0, 0.0, &mut dy);
    s.vjp_forward(x, 0.0, 1.0, &mut dl);
    Ok(SplineGrad {
        y: local.y,
        logdet: local.logdet,
        dy_dx: local.dy_dx,
        dlogdet_dx: local.dlogdet_dx,
        dy_dparams: dy,
        dlogdet_dparams: dl,
    })
}

#[inline]
fn softplus(v: f64) -> f64 {
    v.max(0.0) + (-v.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn softmax(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (d, s) in dst.iter_mut().zip(src) {
        *d = (s - max).exp();
        sum += *d;
    }
    dst.iter_mut().for_each(|d| *d /= sum);
}

/// Normalised knots of one spline, built once and reused for forward,
/// inverse and gradient queries.
pub(crate) struct Spline<'a> {
    cfg: &'a SplineConfig,
    raw: &'a [f64],
    identity: bool,
    soft_w: [f64; MAX_BINS],
    soft_h: [f64; MAX_BINS],
    xs: [f64; MAX_BINS + 1],
    ys: [f64; MAX_BINS + 1],
    ds: [f64; MAX_BINS + 1],
    dsig: [f64; MAX_BINS + 1],
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Local {
    pub y: f64,
    pub logdet: f64,
    pub dy_dx: f64,
    pub dlogdet_dx: f64,
}

impl<'a> Spline<'a> {
    pub(crate) fn new(cfg: &'a SplineConfig, raw: &'a [f64]) -> Result<Self> {
        debug_assert_eq!(raw.len(), cfg.param_count());
        if let Some(index) = raw.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                index,
                context: "spline parameters".into(),
            });
        }
        let k = cfg.bins;
        let b = cfg.bound;
        let off = cfg.derivative_offset();
        let identity = raw[..2 * k].iter().all(|v| *v == 0.0) && raw[2 * k..].iter().all(|v| *v == off);

        let mut s = Spline {
            cfg,
            raw,
            identity,
            soft_w: [0.0; MAX_BINS],
            soft_h: [0.0; MAX_BINS],
            xs: [0.0; MAX_BINS + 1],
            ys: [0.0; MAX_BINS + 1],
            ds: [0.0; MAX_BINS + 1],
            dsig: [0.0; MAX_BINS + 1],
        };
        softmax(&raw[..k], &mut s.soft_w[..k]);
        softmax(&raw[k..2 * k], &mut s.soft_h[..k]);
        let free_w = 1.0 - cfg.min_bin_width * k as f64;
        let free_h = 1.0 - cfg.min_bin_height * k as f64;
        s.xs[0] = -b;
        s.ys[0] = -b;
        for j in 0..k {
            s.xs[j + 1] = s.xs[j] + 2.0 * b * (cfg.min_bin_width + free_w * s.soft_w[j]);
            s.ys[j + 1] = s.ys[j] + 2.0 * b * (cfg.min_bin_height + free_h * s.soft_h[j]);
        }
        s.xs[k] = b;
        s.ys[k] = b;
        s.ds[0] = 1.0;
        s.ds[k] = 1.0;
        for i in 1..k {
            let v = raw[2 * k + i - 1];
            s.ds[i] = cfg.min_derivative + softplus(v);
            s.dsig[i] = sigmoid(v);
        }
        Ok(s)
    }

    #[inline]
    fn inside(&self, x: f64) -> bool {
        x >= -self.cfg.bound && x <= self.cfg.bound
    }

    fn bin_of(knots: &[f64], k: usize, x: f64) -> usize {
        let mut bin = 0;
        while bin + 1 < k && x >= knots[bin + 1] {
            bin += 1;
        }
        bin
    }

    fn eval_in_bin(&self, bin: usize, x: f64) -> (f64, f64) {
        let (xk, wk) = (self.xs[bin], self.xs[bin + 1] - self.xs[bin]);
        let (yk, hk) = (self.ys[bin], self.ys[bin + 1] - self.ys[bin]);
        let (dk, dk1) = (self.ds[bin], self.ds[bin + 1]);
        let xi = (x - xk) / wk;
        let s = hk / wk;
        let om = xi * (1.0 - xi);
        let denom = s + (dk1 + dk - 2.0 * s) * om;
        let y = yk + hk * (s * xi * xi + dk * om) / denom;
        let dnum = s * s * (dk1 * xi * xi + 2.0 * s * om + dk * (1.0 - xi) * (1.0 - xi));
        (y, dnum.ln() - 2.0 * denom.ln())
    }

    pub(crate) fn forward(&self, x: f64) -> (f64, f64) {
        if self.identity || !self.inside(x) {
            return (x, 0.0);
        }
        let bin = Self::bin_of(&self.xs, self.cfg.bins, x);
        self.eval_in_bin(bin, x)
    }

    /// Returns the pre-image and the (forward) log-derivative at it.
    fn solve(&self, y: f64) -> (f64, f64) {
        if self.identity || !self.inside(y) {
            return (y, 0.0);
        }
        let bin = Self::bin_of(&self.ys, self.cfg.bins, y);
        let (xk, wk) = (self.xs[bin], self.xs[bin + 1] - self.xs[bin]);
        let (yk, hk) = (self.ys[bin], self.ys[bin + 1] - self.ys[bin]);
        let (dk, dk1) = (self.ds[bin], self.ds[bin + 1]);
        let s = hk / wk;
        let dy = y - yk;
        let t = dk1 + dk - 2.0 * s;
        let a = hk * (s - dk) + dy * t;
        let b = hk * dk - dy * t;
        let c = -s * dy;
        let disc = (b * b - 4.0 * a * c).max(0.0);
        let xi = (2.0 * c / (-b - disc.sqrt())).clamp(0.0, 1.0);
        let x = xk + xi * wk;
        let (_, l) = self.eval_in_bin(bin, x);
        (x, l)
    }

    pub(crate) fn inverse(&self, y: f64) -> (f64, f64) {
        let (x, l) = self.solve(y);
        (x, -l)
    }

    /// Forward derivatives at `x`; accumulates
    /// `a * dy/dparams + c * dlogdet/dparams` into `grad`.
    pub(crate) fn vjp_forward(&self, x: f64, a: f64, c: f64, grad: &mut [f64]) -> Local {
        if !self.inside(x) {
            return Local {
                y: x,
                logdet: 0.0,
                dy_dx: 1.0,
                dlogdet_dx: 0.0,
            };
        }
        let k = self.cfg.bins;
        let bin = Self::bin_of(&self.xs, k, x);
        let (y, l) = local_duals(
            x,
            self.xs[bin],
            self.xs[bin + 1] - self.xs[bin],
            self.ys[bin],
            self.ys[bin + 1] - self.ys[bin],
            self.ds[bin],
            self.ds[bin + 1],
        );
        if a != 0.0 || c != 0.0 {
            let g: [f64; 7] = std::array::from_fn(|i| a * y.g[i] + c * l.g[i]);
            let b2 = 2.0 * self.cfg.bound;
            let scale_w = b2 * (1.0 - self.cfg.min_bin_width * k as f64);
            let scale_h = b2 * (1.0 - self.cfg.min_bin_height * k as f64);
            softmax_backward(&self.soft_w[..k], bin, g[1] * scale_w, g[2] * scale_w, &mut grad[..k]);
            softmax_backward(&self.soft_h[..k], bin, g[3] * scale_h, g[4] * scale_h, &mut grad[k..2 * k]);
            if bin >= 1 {
                grad[2 * k + bin - 1] += g[5] * self.dsig[bin];
            }
            if bin + 1 < k {
                grad[2 * k + bin] += g[6] * self.dsig[bin + 1];
            }
        }
        let _ = self.raw;
        Local {
            y: y.v,
            logdet: l.v,
            dy_dx: y.g[0],
            dlogdet_dx: l.g[0],
        }
    }

    /// Inverse at `y`; accumulates `xbar * dx/dparams` into `grad` and
    /// returns `(x, xbar * dx/dy)`.
    pub(crate) fn vjp_inverse(&self, y: f64, xbar: f64, grad: &mut [f64]) -> (f64, f64) {
        let (x, l) = self.solve(y);
        if !self.inside(y) {
            return (x, xbar);
        }
        let slope = l.exp();
        self.vjp_forward(x, -xbar / slope, 0.0, grad);
        (x, xbar / slope)
    }
}

/// Gradient of a quantity through `widths_j = min + free * softmax(u)_j`
/// where the quantity depends on the knot position `sum_{j<bin} widths_j`
/// (weight `g_pos`) and on `widths_bin` (weight `g_len`).
fn softmax_backward(soft: &[f64], bin: usize, g_pos: f64, g_len: f64, grad: &mut [f64]) {
    let g_of = |j: usize| {
        if j < bin {
            g_pos
        } else if j == bin {
            g_len
        } else {
            0.0
        }
    };
    let mean: f64 = soft.iter().enumerate().map(|(j, s)| g_of(j) * s).sum();
    for (j, s) in soft.iter().enumerate() {
        grad[j] += s * (g_of(j) - mean);
    }
}

/// Dual number carrying partials with respect to the seven local inputs
/// `(x, x_k, w_k, y_k, h_k, d_k, d_{k+1})` of one spline bin.
#[derive(Debug, Clone, Copy)]
struct D7 {
    v: f64,
    g: [f64; 7],
}

impl D7 {
    fn var(v: f64, i: usize) -> Self {
        let mut g = [0.0; 7];
        g[i] = 1.0;
        D7 { v, g }
    }

    fn ln(self) -> Self {
        let inv = 1.0 / self.v;
        D7 {
            v: self.v.ln(),
            g: self.g.map(|d| d * inv),
        }
    }

    fn rsub(self, c: f64) -> Self {
        D7 {
            v: c - self.v,
            g: self.g.map(|d| -d),
        }
    }

    fn scale(self, c: f64) -> Self {
        D7 {
            v: self.v * c,
            g: self.g.map(|d| d * c),
        }
    }
}

impl Add for D7 {
    type Output = D7;
    fn add(self, o: D7) -> D7 {
        D7 {
            v: self.v + o.v,
            g: std::array::from_fn(|i| self.g[i] + o.g[i]),
        }
    }
}

impl Sub for D7 {
    type Output = D7;
    fn sub(self, o: D7) -> D7 {
        D7 {
            v: self.v - o.v,
            g: std::array::from_fn(|i| self.g[i] - o.g[i]),
        }
    }
}

impl Mul for D7 {
    type Output = D7;
    fn mul(self, o: D7) -> D7 {
        D7 {
            v: self.v * o.v,
            g: std::array::from_fn(|i| self.g[i] * o.v + self.v * o.g[i]),
        }
    }
}

impl Div for D7 {
    type Output = D7;
    fn div(self, o: D7) -> D7 {
        let inv = 1.0 / o.v;
        let q = self.v * inv;
        D7 {
            v: q,
            g: std::array::from_fn(|i| (self.g[i] - q * o.g[i]) * inv),
        }
    }
}

fn local_duals(x: f64, xk: f64, wk: f64, yk: f64, hk: f64, dk: f64, dk1: f64) -> (D7, D7) {
    let x = D7::var(x, 0);
    let xk = D7::var(xk, 1);
    let wk = D7::var(wk, 2);
    let yk = D7::var(yk, 3);
    let hk = D7::var(hk, 4);
    let dk = D7::var(dk, 5);
    let dk1 = D7::var(dk1, 6);

    let xi = (x - xk) / wk;
    let one_m = xi.rsub(1.0);
    let s = hk / wk;
    let om = xi * one_m;
    let denom = s + (dk1 + dk - s.scale(2.0)) * om;
    let y = yk + hk * (s * xi * xi + dk * om) / denom;
    let dnum = s * s * (dk1 * xi * xi + s.scale(2.0) * om + dk * one_m * one_m);
    let l = dnum.ln() - denom.ln().scale(2.0);
    (y, l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_params(seed: u64, scale: f64) -> RqSplineParams {
        let cfg = SplineConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = (0..cfg.param_count()).map(|_| rng.gen_range(-scale..scale)).collect();
        RqSplineParams { config: cfg, raw }
    }

    #[test]
    fn identity_spline_is_identity() {
        let p = RqSplineParams::identity(SplineConfig::default());
        assert_eq!(spline_forward(&p, 0.7).unwrap(), (0.7, 0.0));
        assert_eq!(spline_inverse(&p, -0.2).unwrap(), (-0.2, 0.0));
    }

    #[test]
    fn identity_params_evaluate_to_identity_through_general_path() {
        let cfg = SplineConfig::default();
        let raw = cfg.identity_params();
        let s = Spline::new(&cfg, &raw).unwrap();
        let mut g = vec![0.0; raw.len()];
        let local = s.vjp_forward(0.7, 1.0, 0.0, &mut g);
        assert_abs_diff_eq!(local.y, 0.7, epsilon = 1e-14);
        assert_abs_diff_eq!(local.logdet, 0.0, epsilon = 1e-14);
    }

    #[test]
    fn tails_are_identity() {
        let mut p = random_params(3, 2.0);
        p.config.bound = 3.0;
        assert_eq!(spline_forward(&p, 5.0).unwrap(), (5.0, 0.0));
        assert_eq!(spline_forward(&p, -3.5).unwrap(), (-3.5, 0.0));
        assert_eq!(spline_inverse(&p, 7.0).unwrap(), (7.0, 0.0));
    }

    #[test]
    fn round_trip_and_logdet_cancel() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for seed in 0..5 {
            let p = random_params(seed, 3.0);
            for _ in 0..1000 {
                let x = rng.gen_range(-6.0..6.0);
                let (y, l) = spline_forward(&p, x).unwrap();
                let (x2, li) = spline_inverse(&p, y).unwrap();
                assert!((x - x2).abs() < 1e-9, "x {x} -> {y} -> {x2}");
                assert!((l + li).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn inverse_is_monotone() {
        let p = random_params(21, 3.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ys: Vec<f64> = (0..2000).map(|_| rng.gen_range(-5.5..5.5)).collect();
        ys.sort_by(f64::total_cmp);
        let xs: Vec<f64> = ys.iter().map(|y| spline_inverse(&p, *y).unwrap().0).collect();
        for w in xs.windows(2) {
            assert!(w[0] <= w[1]);
        }
    }

    #[test]
    fn derivative_is_continuous_at_bounds() {
        let p = random_params(5, 2.0);
        let b = p.config.bound;
        let (_, l_in) = spline_forward(&p, b - 1e-9).unwrap();
        assert!(l_in.abs() < 1e-6);
        let (_, l_in) = spline_forward(&p, -b + 1e-9).unwrap();
        assert!(l_in.abs() < 1e-6);
    }

    #[test]
    fn nonfinite_params_rejected() {
        let mut p = random_params(1, 1.0);
        p.raw[4] = f64::NAN;
        assert!(matches!(spline_forward(&p, 0.0), Err(Error::Numeric { index: 4, .. })));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let h = 1e-6;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for seed in 0..6 {
            let p = random_params(seed, 2.0);
            for _ in 0..20 {
                let x = rng.gen_range(-4.9..4.9);
                let g = spline_gradients(&p, x).unwrap();
                let (yp, lp) = spline_forward(&p, x + h).unwrap();
                let (ym, lm) = spline_forward(&p, x - h).unwrap();
                assert!((g.dy_dx - (yp - ym) / (2.0 * h)).abs() < 1e-6 * g.dy_dx.abs().max(1.0));
                assert!((g.dlogdet_dx - (lp - lm) / (2.0 * h)).abs() < 1e-5 * g.dlogdet_dx.abs().max(1.0));
                for i in 0..p.raw.len() {
                    let mut pp = p.clone();
                    pp.raw[i] += h;
                    let mut pm = p.clone();
                    pm.raw[i] -= h;
                    let (yp, lp) = spline_forward(&pp, x).unwrap();
                    let (ym, lm) = spline_forward(&pm, x).unwrap();
                    let fy = (yp - ym) / (2.0 * h);
                    let fl = (lp - lm) / (2.0 * h);
                    assert!((g.dy_dparams[i] - fy).abs() < 1e-6, "dy/dp[{i}] {} vs {}", g.dy_dparams[i], fy);
                    assert!((g.dlogdet_dparams[i] - fl).abs() < 1e-5, "dl/dp[{i}] {} vs {}", g.dlogdet_dparams[i], fl);
                }
            }
        }
    }

    #[test]
    fn inverse_gradient_matches_finite_differences() {
        let p = random_params(9, 2.0);
        let cfg = p.config;
        let h = 1e-6;
        for &y in &[-3.3, -0.4, 0.1, 2.7] {
            let s = Spline::new(&cfg, &p.raw).unwrap();
            let mut g = vec![0.0; p.raw.len()];
            let (_, dxdy) = s.vjp_inverse(y, 1.0, &mut g);
            let fd = (spline_inverse(&p, y + h).unwrap().0 - spline_inverse(&p, y - h).unwrap().0) / (2.0 * h);
            assert!((dxdy - fd).abs() < 1e-6);
            for i in 0..p.raw.len() {
                let mut pp = p.clone();
                pp.raw[i] += h;
                let mut pm = p.clone();
                pm.raw[i] -= h;
                let fd = (spline_inverse(&pp, y).unwrap().0 - spline_inverse(&pm, y).unwrap().0) / (2.0 * h);
                assert!((g[i] - fd).abs() < 1e-6, "dx/dp[{i}] {} vs {}", g[i], fd);
            }
        }
    }
}
