//! Generalized category discovery at desk scale: a parametric-classifier
//! baseline extended with instance-level (k-reciprocal neighborhood) and
//! cluster-level (cross-view prototype) contextual losses, trained end to end
//! with verified analytic gradients.
//!
//! The crate is organized along the pipeline:
//!
//! - [`numeric`]: dense f64 arithmetic, stable transforms, gradient checker
//! - [`rng`]: deterministic splittable random streams
//! - [`dataset`]: synthetic problems, file ingestion, stochastic views
//! - [`model`]: MLP encoder, projection head, prototype classifier
//! - [`mining`]: neighbor sets, pseudo-labels, pair labels, prototypes
//! - [`losses`]: every loss term with analytic input gradients
//! - [`batching`]: query-anchored mini-batch construction
//! - [`trainer`]: schedules, warmup protocol, the optimization loop
//! - [`eval`]: Hungarian matching and All/Old/New clustering accuracy
//! - [`config`]: serialized experiment configuration

pub mod batching;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod losses;
pub mod mining;
pub mod model;
pub mod numeric;
pub mod rng;
pub mod trainer;

pub use error::{GcdError, Result};
