//! Metric scale recovery for self-supervised monocular depth and egomotion,
//! driven by a known camera height above the ground plane.
//!
//! The pipeline: back-project depth to a point cloud, segment the ground
//! with an iteratively reweighted plane fit, estimate the camera height, and
//! turn the ratio to the known height into a scale factor that either
//! rescales predictions after the fact or supervises training through the
//! depth- and translation-scaling losses.

pub mod cli;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod losses;
pub mod optimize;
pub mod plane;
pub mod synth;
pub mod warp;

pub use error::{Error, Result};
