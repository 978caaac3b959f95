//! Atlas flows: generative modelling on data manifolds with an overlapping
//! chart cover.
//!
//! The pipeline runs in four stages:
//!
//! 1. [`cover`] builds an overlapping chart cover of the point cloud with
//!    Mapper (PCA lens, interval cover, single-linkage clustering).
//! 2. [`geo`] runs Isomap on each chart to obtain pretraining targets and
//!    geodesic reference distances.
//! 3. [`atlas::train`] fits, per chart, a coordinate flow `phi` that flattens
//!    the chart onto `R^n x {0}` and a density flow `gamma` that pushes the
//!    latent distribution to a standard normal. Overlapping charts are glued
//!    through a compatibility loss against expected points.
//! 4. [`atlas::sample`] and [`atlas::log_density`] generate points and
//!    evaluate densities, weighting charts by the disintegration constants.
//!
//! The flows ([`flow`]) are stacks of rational-quadratic spline coupling
//! layers whose gradients are hand-derived ([`nnopt`] holds the MLP
//! conditioners and the optimizer).

pub mod atlas;
pub mod cover;
pub mod error;
pub mod flow;
pub mod geo;
pub mod io;
pub mod linalg;
pub mod losses;
pub mod nnopt;
pub mod synth;

pub use atlas::{AtlasModel, ChartModel, TrainConfig};
pub use cover::{ChartCover, MapperConfig, RefinedPartition};
pub use error::{Error, Result};
pub use flow::{FlowStack, SplineConfig};
pub use synth::{ManifoldKind, ManifoldSpec, PointCloud};
