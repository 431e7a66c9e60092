//! Bayesian inference engine and simulation laboratory for spatio-temporal
//! Poisson count regression with dynamic, spatially structured coefficients
//! and exposure detrending.
//!
//! The crate is organized around the workflow of an areal count study:
//!
//! * [`graph`] builds areal adjacency and the precision matrices behind the
//!   spatial priors and the simulator's innovations;
//! * [`basis`] provides spline bases and the large-scale exposure trend whose
//!   residual carries the local association;
//! * [`model`] holds panel data, priors, and the coefficient decomposition;
//! * [`sampler`] runs the Gibbs/Metropolis chain over all parameter blocks;
//! * [`competitors`] fits the pooled hierarchical benchmark family;
//! * [`simulator`] generates synthetic panels with known effect surfaces;
//! * [`diagnostics`] computes model-choice and recovery metrics;
//! * [`summary`] reduces chains to effect estimates on the reporting scale.

pub mod basis;
pub mod competitors;
pub mod diagnostics;
pub mod graph;
pub mod linalg;
pub mod model;
pub mod rng;
pub mod sampler;
pub mod simulator;
pub mod stacked;
pub mod summary;

pub use basis::{fit_space_time_trend, natural_cubic_basis, seasonal_harmonics, TrendFit};
pub use graph::SpatialGraph;
pub use model::{
    linear_predictor, percent_change, percent_change10, CoefficientField, InteractionType,
    PanelData, PriorConfig,
};
pub use sampler::{fit_model, run_chain, FitOptions, PosteriorDraws, Variant};
