//! Vision-based lane keeping by direct imitation learning.

// Validation uses `!(x > 0.0)` on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod camera;
pub mod dataset;
pub mod expert;
pub mod geometry;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod policy;
pub mod vehicle;
