//! Training-free scene change detection for unaligned image pairs.
//!
//! Depth and camera poses establish pixel correspondences between the two
//! views; frozen feature maps are compared along those correspondences, and
//! segmentation masks turn the resulting proposals into object-level changes.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bundle;
pub mod correlation;
pub mod geometry;
pub mod illumination;
pub mod matching;
pub mod metrics;
pub mod occlusion;
pub mod pipeline;
pub mod stats;
pub mod synthetic;
pub mod tensor;
