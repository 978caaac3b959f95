use serde::{Deserialize, Serialize};

use crate::cover::MapperConfig;
use crate::error::{Error, Result};
use crate::flow::FlowConfig;

/// Epoch counts of the five training phases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Epochs {
    /// Pretraining of `phi` against Isomap targets, then of `gamma`.
    pub e1: usize,
    /// Joint training while the distance/reconstruction mix is annealed.
    pub e2: usize,
    /// Joint training at the final mix.
    pub e3: usize,
    /// Compatibility training across charts.
    pub e4: usize,
    /// Density-only training.
    pub e5: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub latent_dim: usize,
    pub flow: FlowConfig,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: Epochs,
    pub lambda_m: f64,
    pub lambda_p: f64,
    pub lambda_o: f64,
    pub lambda_d: f64,
    /// Expected points are refreshed every this many compatibility epochs.
    pub refresh_every: usize,
    pub clip_norm: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub mapper: MapperConfig,
    pub isomap_k: usize,
    /// A chart takes part in the mixture density at `x` when its
    /// reconstruction of `x` is closer than this.
    pub membership_threshold: f64,
}

impl TrainConfig {
    pub fn torus() -> Self {
        TrainConfig {
            latent_dim: 2,
            flow: FlowConfig {
                layers: 13,
                ..FlowConfig::default()
            },
            lr: 0.0015,
            batch_size: 256,
            epochs: Epochs {
                e1: 60,
                e2: 30,
                e3: 60,
                e4: 60,
                e5: 60,
            },
            lambda_m: 100.0,
            lambda_p: 0.1,
            lambda_o: 25.0,
            lambda_d: 0.01,
            refresh_every: 2,
            clip_norm: 5.0,
            weight_decay: 1e-4,
            seed: 0,
            mapper: MapperConfig {
                n_cubes: 5,
                perc_overlap: 0.45,
                linkage_threshold: 1.0,
                ..MapperConfig::default()
            },
            isomap_k: 10,
            membership_threshold: 0.3,
        }
    }

    pub fn trefoil() -> Self {
        TrainConfig {
            latent_dim: 1,
            flow: FlowConfig {
                layers: 11,
                ..FlowConfig::default()
            },
            epochs: Epochs {
                e1: 15,
                e2: 30,
                e3: 60,
                e4: 60,
                e5: 60,
            },
            lambda_m: 100.0,
            lambda_p: 0.01,
            lambda_o: 100.0,
            lambda_d: 0.1,
            mapper: MapperConfig {
                n_cubes: 2,
                perc_overlap: 0.2,
                linkage_threshold: 1.0,
                ..MapperConfig::default()
            },
            ..TrainConfig::torus()
        }
    }

    /// Schedule for embedded image-generator latents, where pretraining is
    /// skipped.
    pub fn stylegan(latent_dim: usize) -> Self {
        TrainConfig {
            latent_dim,
            lr: 1e-4,
            batch_size: 512,
            epochs: Epochs {
                e1: 0,
                e2: 0,
                e3: 40,
                e4: 80,
                e5: 60,
            },
            lambda_m: 100.0,
            lambda_p: 0.0,
            lambda_o: 100.0,
            lambda_d: 0.01,
            refresh_every: 5,
            clip_norm: 1.0,
            mapper: MapperConfig {
                n_cubes: 2,
                perc_overlap: 0.33,
                linkage_threshold: 1.0,
                ..MapperConfig::default()
            },
            ..TrainConfig::torus()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr", self.lr),
            ("lambda_m", self.lambda_m),
            ("lambda_d", self.lambda_d),
            ("clip_norm", self.clip_norm),
            ("membership_threshold", self.membership_threshold),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.latent_dim == 0 {
            return Err(Error::config("latent_dim must be positive"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch_size must be at least 2"));
        }
        if !(0.0..=1.0).contains(&self.lambda_p) {
            return Err(Error::config("lambda_p must lie in [0, 1]"));
        }
        if !(self.lambda_o.is_finite() && self.lambda_o >= 0.0) {
            return Err(Error::config("lambda_o must be nonnegative"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay must be nonnegative"));
        }
        if self.refresh_every == 0 {
            return Err(Error::config("refresh_every must be at least 1"));
        }
        if self.isomap_k == 0 {
            return Err(Error::config("isomap_k must be positive"));
        }
        if self.flow.layers == 0 {
            return Err(Error::config("flows need at least one layer"));
        }
        self.flow.spline.validate()?;
        self.mapper.validate()
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::torus()
    }
}
