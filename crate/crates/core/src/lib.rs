//! Monocular depth estimation guided by a single planar laser scan.
//!
//! A sparse horizontal range scan is turned into a dense reference depth
//! map; a residual-of-residual convolutional network then learns the
//! per-pixel correction from the image, trained with a joint
//! classification and regression objective over discretized residuals.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod network;
pub mod raster;
pub mod refmap;
pub mod scene_sim;
pub mod training;

pub use error::{Error, Result};
