//! Gaussian splatting with per-attribute stochastic local Newton training.
//!
//! The crate is organised bottom-up: scene and camera geometry, spherical
//! harmonics colour, the rasterizer, the image loss and its pixel-wise
//! derivatives, the five local Newton solves, secondary-target accumulation,
//! and the training loop with first-order baselines.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::type_complexity)]

pub mod bench;
pub mod camera;
pub mod dataset;
pub mod error;
pub mod fd;
pub mod gaussian;
pub mod gradcheck;
pub mod gradient;
pub mod image;
pub mod loss;
pub mod metrics;
pub mod newton;
pub mod raster;
pub mod scene;
pub mod secondary;
pub mod sh;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
