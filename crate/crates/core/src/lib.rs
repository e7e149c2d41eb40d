//! Closed-loop proportional-integral model of blood glucose homeostasis.
//!
//! * [`model`]: parameters, input pulses and the two forward-Euler integrators
//! * [`analysis`]: equilibria, stability and Lyapunov trapping regions
//! * [`signal`]: CGM ingestion, Gaussian smoothing, peak and trough extraction
//! * [`fit`]: conformation of model parameters to extracted excursions
//! * [`stats`]: bootstrap subject means, Shapiro-Wilk and cohort tables
//! * [`synth`]: synthetic CGM traces with planted excursions
//!
//! The model and analysis code is generic over [`Real`] (`f32` or `f64`); the
//! aliases below fix the scalar to `f64`, which the data pipeline uses.

// `!(x > 0.0)` guards are intentional: they reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod error;
pub mod fit;
pub mod model;
pub mod num;
pub mod signal;
pub mod stats;
pub mod synth;

pub use error::{Error, Result};
pub use num::Real;

pub type ModelParams = model::ModelParams<f64>;
pub type InputPulse = model::InputPulse<f64>;
pub type ModelState = model::ModelState<f64>;
pub type Trajectory = model::Trajectory<f64>;
pub type Forcing = model::Forcing<f64>;
pub type Equilibrium = analysis::Equilibrium<f64>;
pub type StabilityReport = analysis::StabilityReport<f64>;
pub type TrappingBound = analysis::TrappingBound<f64>;

pub type ModelParams32 = model::ModelParams<f32>;
pub type Trajectory32 = model::Trajectory<f32>;
