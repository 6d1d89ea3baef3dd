//! Probabilistic cyclist-intention forecasting: motion history images,
//! motion-state classification with calibration, per-state Gaussian
//! trajectory forecasters, a weighted mixture ensemble, and an evaluation
//! suite for arbitrary forecast densities.

// `!(x > 0.0)` is used throughout to reject NaN along with bad values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod classifier;
pub mod data_synth;
pub mod error;
pub mod evaluation;
pub mod forecaster;
pub mod geometry;
pub mod gradcheck;
pub mod mhi;
pub mod mixture;
pub mod motion_states;
pub mod neural;

pub use error::{Error, Result};
