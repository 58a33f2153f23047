//! Single-image mass estimation as volume × density.
//!
//! Geometry (a point cloud lifted from a depth map), material (a parsed
//! text label) and appearance cues are encoded, fused, and decoded by two
//! heads whose product is the mass. [`synthbench`] provides a procedural
//! benchmark with exact ground truth.

// Range checks are written as `!(x > lo)` on purpose so that NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod fusion;
pub mod geometry;
pub mod heads;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod semantics;
pub mod synthbench;

pub use error::{Error, Result};
