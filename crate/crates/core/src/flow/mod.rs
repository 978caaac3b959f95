//! Invertible maps built from rational-quadratic spline coupling layers.

mod coupling;
mod spline;
mod stack;

use serde::{Deserialize, Serialize};

use crate::nnopt::Activation;

pub use coupling::{alternating_mask, coupling_forward, coupling_inverse, CouplingLayer};
pub use spline::{spline_forward, spline_gradients, spline_inverse, RqSplineParams, SplineConfig, SplineGrad, MAX_BINS};
pub use stack::{embedding_gram_logdet, project, reconstruct, stack_forward, stack_inverse, FlowStack, Normalization, Tape};

#[allow(unused_imports)]
pub(crate) use stack::{embedding_jacobian, gram_half_logdet};

/// Architecture of one flow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    pub layers: usize,
    /// Hidden widths of every conditioner network.
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub spline: SplineConfig,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            layers: 12,
            hidden: vec![64, 64],
            activation: Activation::Tanh,
            spline: SplineConfig::default(),
        }
    }
}
