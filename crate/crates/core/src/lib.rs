//! Flow matching along interpolants that follow a data-dependent metric.
//!
//! Learns a data-dependent diagonal Riemannian metric, trains a neural correction
//! to straight interpolants so that paths minimise the metric's kinetic energy,
//! then regresses a vector field on the interpolant velocities.

pub mod coupling;
pub mod datasets;
pub mod error;
pub mod eval;
pub mod harness;
pub mod interpolant;
pub mod matching;
pub mod matrix;
pub mod metrics;
pub mod nn;
pub mod oracle;
pub mod rng;
pub mod training;

pub use coupling::{independent_pairs, ot_pairs, solve_assignment, Coupling, CouplingPlan};
pub use datasets::{Marginal, PointSet, SyntheticPair, WhitenTransform};
pub use error::{Error, Result};
pub use interpolant::{InterpolantModel, InterpolantVariant};
pub use matching::{MatchConfig, NormMode, VectorFieldModel};
pub use matrix::Matrix;
pub use metrics::{DiagonalMetric, LandMetric, MetricField, RbfMetric};
