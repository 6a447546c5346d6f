//! Per-Gaussian aesthetic feature fields and viewpoint search.
//!
//! A scene of Gaussian splats carries a small feature vector per splat.
//! Rendering those features through the splatting rasterizer, pooling them to
//! a coarse grid and decoding the grid gives a differentiable score for any
//! camera pose. Fields are fitted per scene against teacher feature maps
//! ([`distill`]) and searched for high-scoring viewpoints ([`search`]).

// `!(x >= 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aesthetic;
pub mod bench;
pub mod distill;
pub mod error;
pub mod export;
pub mod geometry;
pub mod metrics;
pub mod optim;
pub mod raster;
pub mod scene;
pub mod search;

pub use error::{Error, Result};
