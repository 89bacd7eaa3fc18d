//! Keypoint matching for nonrigid cross-modal registration.
//!
//! The pipeline runs in four stages:
//!
//! - **`descriptors`**: local patch descriptors, bilinear sampling of dense
//!   semantic feature maps at keypoints, and fusion of the two through a small
//!   perceptron. Also owns the binary descriptor/feature-map interchange format.
//! - **`matcher`**: dual-softmax scoring with a mutual-argmax check, producing
//!   the putative match set.
//! - **`gccm`**: the geometric consistency confidence module. Random 4-subsets
//!   of the putative matches are scored by a coordinate-only classifier and the
//!   per-match mean score is thresholded.
//! - **`baseline`**: RANSAC over similarity transforms, the classical verifier.
//!
//! Supporting modules: `geometry` (points, similarity and thin-plate-spline
//! transforms), `nn` (dense networks with reverse-mode gradients), `synthdata`
//! (synthetic scenes, deformations and matching tasks), `raster` (grayscale
//! images), `evalmetrics` (precision, inliers, TRE, benchmark reports) and
//! `suite` (the standard benchmark suites and their training recipe).

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baseline;
pub mod descriptors;
pub mod error;
pub mod evalmetrics;
pub mod gccm;
pub mod geometry;
pub mod matcher;
pub mod nn;
pub mod raster;
pub mod rng;
pub mod suite;
pub mod synthdata;

pub use error::{Error, Result};
pub use geometry::{Point2, SimilarityTransform, ThinPlateSpline};
pub use matcher::{Match, MatchSet};

/// Version tags for every on-disk schema, reported by the CLI.
pub mod formats {
    pub const DESCRIPTOR_FORMAT_VERSION: u16 = 1;
    pub const FEATURE_MAP_FORMAT_VERSION: u16 = 1;
    pub const MODEL_FORMAT_VERSION: u32 = 1;
    pub const GCCM_FORMAT_VERSION: u32 = 1;
    pub const TRANSFORM_FORMAT_VERSION: u32 = 1;
    pub const MATCH_FORMAT_VERSION: u32 = 1;
    pub const TASK_FORMAT_VERSION: u32 = 1;
    pub const REPORT_FORMAT_VERSION: u32 = 1;
}
