//! Hierarchical Bayesian growth models for longitudinal outcomes collected in
//! rolling-admission therapy groups.
//!
//! Session-level random effects are modeled with a convolution prior: an
//! intrinsic conditionally autoregressive (CAR) component over a session
//! neighborhood graph plus an unstructured normal component. Pattern-mixture
//! variants shift the fixed trajectory for clients in a known dropout pattern.
//!
//! Modules:
//! - [`data`]: long-format datasets, CSV I/O, pattern indicators.
//! - [`graph`]: closeness weights, islands, CAR full conditionals.
//! - [`models`]: model specs, linear predictor, deviance, priors.
//! - [`sampler`]: multi-chain Gibbs sampler with MAR data augmentation.
//! - [`diagnostics`]: PSRF, HPD intervals, Dbar/pD/DIC, summaries.
//! - [`simstudy`]: synthetic rolling-group generator and replication harness.

pub mod data;
pub mod diagnostics;
pub mod error;
pub mod graph;
pub mod models;
pub mod rng;
pub mod sampler;
pub mod simstudy;

pub use error::{Error, Result};
