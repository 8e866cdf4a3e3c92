//! Dynamic traffic modeling from overhead imagery.
//!
//! The crate covers the whole pipeline: geographic tiling and rasterization
//! of road segments, speed-record aggregation, a synthetic city standing in
//! for imagery and probe data, a small reverse-mode autodiff engine, the
//! multi-task road / orientation / speed network, its losses and optimizer,
//! and the downstream routing and isochrone applications.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod autodiff;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod geo;
pub mod graphapp;
pub mod losses;
pub mod model;
pub mod raster;
pub mod trainer;

pub use error::{Error, Result};
