//! Tools for measuring and correcting the covariance calibration of Kalman
//! filters.
//!
//! The crate covers the whole pipeline: linear and extended Kalman filters
//! with a seeded simulation harness ([`filters`], [`systems`]), consistency
//! statistics such as NEES, σ-interval counts and the L2 divergence between
//! the NEES histogram and the χ²ₙ density ([`statmath`]), Monte-Carlo and
//! ergodic ground-truth covariances ([`groundtruth`]), and learned
//! calibration maps from estimated to calibrated covariances ([`calmaps`]).

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calmaps;
pub mod error;
pub mod experiments;
pub mod filters;
pub mod groundtruth;
pub mod report;
pub mod statmath;
pub mod synthetic;
pub mod systems;
pub mod trace;

pub use error::{Error, Result};
