//! Quadruped body model toolkit: an SMAL-style articulated mesh, the training
//! losses built on it, an optimization-based parameter fitter, pose and
//! keypoint metrics, and the structure-conditioned synthetic data pipeline.

pub mod camera;
pub mod dataset;
pub mod error;
pub mod fitter;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod synth;

pub use error::{Error, Result};
