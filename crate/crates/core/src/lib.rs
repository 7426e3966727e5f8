//! Gain-schedule autotuning for parameter-varying plants.
//!
//! Controller gains are stored as tensor-product B-spline surfaces over the
//! operating point. A regularized distributional actor-critic agent deforms
//! the surfaces step by step while observing closed-loop responses of a
//! first-order-plus-dead-time plant.

pub mod bsg;
pub mod control;
pub mod env;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod learner;
pub mod nn;
pub mod plant;
pub mod seeds;

pub use error::{Error, Result};
